"""Dense 2-D tensor algebra with reverse-mode differentiation.

Every value is a row-major (rows, cols) float array; scalars are (1, 1).
A :class:`Tape` owns the primitive-op namespace: calling an op through a
tape computes the forward value and records an adjoint closure, and
``tape.backward(loss)`` replays the closures in reverse creation order.
Creation order is a valid topological order because an op can only
consume tensors that already exist.

Broadcasting is deliberately narrow: the second operand of ``add`` and
``mul`` may be a row vector (1, d), a column vector (n, 1), or a scalar
(1, 1). Everything else must match shapes exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(Exception):
    """Operand shapes incompatible with the requested op."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


class ContractError(Exception):
    """An op was called outside its contract (e.g. non-scalar loss)."""


class DeterminismError(Exception):
    """A closure expected to be deterministic produced differing values."""


class NumericsError(Exception):
    """A forward op produced NaN/Inf from finite inputs (debug mode)."""


def _as_matrix(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError("tensor", arr.shape)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A 2-D value in the computation graph. ``grad`` is filled by backward."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        self.data = _as_matrix(data, dtype)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item: tensor has shape {self.data.shape}, expected (1, 1)")
        return float(self.data[0, 0])

    def _add_grad(self, g: np.ndarray, fresh: bool = False) -> None:
        # `fresh` marks g as a newly allocated array the adjoint may donate;
        # views and passed-through buffers must be copied before ownership.
        if self.grad is None:
            self.grad = g if fresh else np.array(g)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Learnable tensor with a persistent gradient accumulator.

    The accumulator survives across tapes: successive backward passes add
    into it, which is what per-query gradient accumulation within a batch
    relies on. The optimizer (or ``zero_grad``) resets it between steps.
    """

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class RowIndex:
    """Integer row-index list with a lazily built scatter plan.

    Scatter-add is implemented as sort-then-segment-sum. The argsort and
    segment boundaries depend only on the index list, so graphs reuse one
    RowIndex per edge column and pay for the plan once.
    """

    __slots__ = ("idx", "_plan")

    def __init__(self, idx):
        self.idx = np.ascontiguousarray(np.asarray(idx, dtype=np.int64).reshape(-1))
        self.idx.flags.writeable = False
        self._plan = None

    def __len__(self):
        return self.idx.shape[0]

    def plan(self):
        if self._plan is None:
            if len(self) == 0:
                self._plan = (None, None, None)
            else:
                sorted_already = bool(np.all(self.idx[1:] >= self.idx[:-1]))
                order = None if sorted_already else np.argsort(self.idx, kind="stable")
                key = self.idx if order is None else self.idx[order]
                starts = np.flatnonzero(np.concatenate(([True], key[1:] != key[:-1])))
                self._plan = (order, starts, key[starts])
        return self._plan


def _scatter_add(num_rows: int, rows: RowIndex, values: np.ndarray) -> np.ndarray:
    out = np.zeros((num_rows, values.shape[1]), dtype=values.dtype)
    if len(rows) == 0:
        return out
    order, starts, targets = rows.plan()
    segment_vals = values if order is None else values.take(order, axis=0)
    out[targets] = np.add.reduceat(segment_vals, starts, axis=0)
    return out


@dataclass
class GradCheckReport:
    """Per-parameter max relative errors from a finite-difference audit."""

    errors: dict = field(default_factory=dict)
    tolerance: float = 0.0

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def failures(self) -> dict:
        return {n: e for n, e in self.errors.items() if e > self.tolerance}

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


class Tape:
    """Ordered record of primitive ops plus their adjoint closures.

    ``grad=False`` skips closure creation for inference-only passes.
    ``debug=True`` checks every forward result for NaN/Inf.
    """

    def __init__(self, grad: bool = True, debug: bool = False):
        self.grad_enabled = grad
        self.debug = debug
        self._record: list[tuple[Tensor, object]] = []

    def __len__(self):
        return len(self._record)

    def _emit(self, op: str, data: np.ndarray, bwd) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if self.debug and not np.all(np.isfinite(data)):
            raise NumericsError(f"{op}: non-finite forward value")
        if self.grad_enabled:
            self._record.append((out, bwd))
        return out

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(node) to every recorded node and parameter.

        Calling twice on the same tape accumulates into parameter
        gradients a second time (callers that do not want that must zero
        the accumulators in between).
        """
        if not self.grad_enabled:
            raise ContractError("backward: tape was created with grad=False")
        if loss.data.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        loss._add_grad(np.ones_like(loss.data))
        for out, bwd in reversed(self._record):
            if out.grad is not None:
                bwd(out.grad)
            if not isinstance(out, Parameter):
                out.grad = None  # free intermediate buffers as we go

    # --- creation -------------------------------------------------------

    def tensor(self, data, dtype=None) -> Tensor:
        """Wrap a constant leaf (no gradient is retained for it)."""
        return Tensor(data, dtype)

    # --- primitives -----------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape)
        ad, bd = a.data, b.data

        def bwd(g):
            a._add_grad(g @ bd.T, fresh=True)
            b._add_grad(ad.T @ g, fresh=True)

        return self._emit("matmul", ad @ bd, bwd)

    @staticmethod
    def _broadcast_kind(op, sa, sb):
        if sa == sb:
            return "same"
        if sb == (1, 1):
            return "scalar"
        if sb == (1, sa[1]):
            return "row"
        if sb == (sa[0], 1):
            return "col"
        raise ShapeError(op, sa, sb)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        kind = self._broadcast_kind("add", a.shape, b.shape)

        def bwd(g):
            a._add_grad(g)
            if kind == "same":
                b._add_grad(g)
            elif kind == "row":
                b._add_grad(g.sum(axis=0, keepdims=True), fresh=True)
            elif kind == "col":
                b._add_grad(g.sum(axis=1, keepdims=True), fresh=True)
            else:
                b._add_grad(g.sum().reshape(1, 1), fresh=True)

        return self._emit("add", a.data + b.data, bwd)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        kind = self._broadcast_kind("mul", a.shape, b.shape)
        ad, bd = a.data, b.data

        def bwd(g):
            a._add_grad(g * bd, fresh=True)
            gb = g * ad
            if kind == "same":
                b._add_grad(gb, fresh=True)
            elif kind == "row":
                b._add_grad(gb.sum(axis=0, keepdims=True), fresh=True)
            elif kind == "col":
                b._add_grad(gb.sum(axis=1, keepdims=True), fresh=True)
            else:
                b._add_grad(gb.sum().reshape(1, 1), fresh=True)

        return self._emit("mul", ad * bd, bwd)

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)

        def bwd(g):
            a._add_grad(c * g, fresh=True)

        return self._emit("scale", c * a.data, bwd)

    def transpose(self, a: Tensor) -> Tensor:
        def bwd(g):
            a._add_grad(g.T)

        return self._emit("transpose", np.ascontiguousarray(a.data.T), bwd)

    def reshape(self, a: Tensor, shape: tuple) -> Tensor:
        rows, cols = shape
        if rows * cols != a.data.size:
            raise ShapeError("reshape", a.shape, shape)
        old = a.shape

        def bwd(g):
            a._add_grad(g.reshape(old))

        return self._emit("reshape", a.data.reshape(shape), bwd)

    def concat_columns(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape[0] != b.shape[0]:
            raise ShapeError("concat_columns", a.shape, b.shape)
        split = a.shape[1]

        def bwd(g):
            a._add_grad(g[:, :split])
            b._add_grad(g[:, split:])

        return self._emit("concat_columns", np.concatenate([a.data, b.data], axis=1), bwd)

    def relu(self, a: Tensor) -> Tensor:
        out_data = np.maximum(a.data, 0.0)

        def bwd(g):
            a._add_grad(g * (out_data > 0), fresh=True)

        return self._emit("relu", out_data, bwd)

    def sigmoid(self, a: Tensor) -> Tensor:
        out_data = 1.0 / (1.0 + np.exp(-a.data))

        def bwd(g):
            a._add_grad(g * out_data * (1.0 - out_data), fresh=True)

        return self._emit("sigmoid", out_data, bwd)

    def exp(self, a: Tensor) -> Tensor:
        out_data = np.exp(a.data)

        def bwd(g):
            a._add_grad(g * out_data, fresh=True)

        return self._emit("exp", out_data, bwd)

    def log(self, a: Tensor) -> Tensor:
        ad = a.data

        def bwd(g):
            a._add_grad(g / ad, fresh=True)

        return self._emit("log", np.log(ad), bwd)

    def reciprocal(self, a: Tensor) -> Tensor:
        out_data = 1.0 / a.data

        def bwd(g):
            a._add_grad(-g * out_data * out_data, fresh=True)

        return self._emit("reciprocal", out_data, bwd)

    def clip(self, a: Tensor, lo: float, hi: float) -> Tensor:
        """Clamp values into [lo, hi]; gradient is zero where saturated."""
        inside = (a.data > lo) & (a.data < hi)

        def bwd(g):
            a._add_grad(g * inside, fresh=True)

        return self._emit("clip", np.clip(a.data, lo, hi), bwd)

    def sum(self, a: Tensor) -> Tensor:
        shape = a.shape

        def bwd(g):
            a._add_grad(np.broadcast_to(g, shape))

        return self._emit("sum", a.data.sum().reshape(1, 1), bwd)

    def mean_rows(self, a: Tensor) -> Tensor:
        n = a.shape[0]
        if n == 0:
            raise ShapeError("mean_rows", a.shape)

        def bwd(g):
            a._add_grad(np.broadcast_to(g / n, a.shape))

        return self._emit("mean_rows", a.data.mean(axis=0, keepdims=True), bwd)

    def layer_norm(self, a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
        """Normalize each row over the feature dimension, then scale/shift."""
        d = a.shape[1]
        if gain.shape != (1, d) or bias.shape != (1, d):
            raise ShapeError("layer_norm", a.shape, gain.shape, bias.shape)
        mu = a.data.mean(axis=1, keepdims=True)
        var = a.data.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (a.data - mu) * inv
        gd = gain.data

        def bwd(g):
            gain._add_grad((g * xhat).sum(axis=0, keepdims=True), fresh=True)
            bias._add_grad(g.sum(axis=0, keepdims=True), fresh=True)
            dxhat = g * gd
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            a._add_grad(inv * (dxhat - m1 - xhat * m2), fresh=True)

        return self._emit("layer_norm", xhat * gd + bias.data, bwd)

    def row_l2_normalize(self, a: Tensor, eps: float = 1e-12) -> Tensor:
        """Scale each row to unit L2 norm; eps guards all-zero rows."""
        norm = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True) + eps)
        out_data = a.data / norm
        ad = a.data

        def bwd(g):
            dot = (g * ad).sum(axis=1, keepdims=True)
            a._add_grad(g / norm - ad * (dot / norm**3), fresh=True)

        return self._emit("row_l2_normalize", out_data, bwd)

    def gather_rows(self, a: Tensor, rows: RowIndex) -> Tensor:
        if not isinstance(rows, RowIndex):
            rows = RowIndex(rows)
        if len(rows) and (rows.idx.min() < 0 or rows.idx.max() >= a.shape[0]):
            raise ShapeError("gather_rows", a.shape, f"index max {rows.idx.max()}")
        num_rows = a.shape[0]

        def bwd(g):
            a._add_grad(_scatter_add(num_rows, rows, g), fresh=True)

        return self._emit("gather_rows", a.data.take(rows.idx, axis=0), bwd)

    def scatter_add_rows(self, num_rows: int, rows: RowIndex, a: Tensor) -> Tensor:
        if not isinstance(rows, RowIndex):
            rows = RowIndex(rows)
        if len(rows) != a.shape[0]:
            raise ShapeError("scatter_add_rows", a.shape, f"{len(rows)} indices")
        if len(rows) and (rows.idx.min() < 0 or rows.idx.max() >= num_rows):
            raise ShapeError("scatter_add_rows", f"{num_rows} rows", f"index max {rows.idx.max()}")
        idx = rows.idx

        def bwd(g):
            a._add_grad(g.take(idx, axis=0), fresh=True)

        return self._emit("scatter_add_rows", _scatter_add(num_rows, rows, a.data), bwd)


def grad_check(loss_fn, params, step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Audit analytic gradients against central finite differences.

    ``loss_fn`` must be a zero-argument deterministic closure returning
    ``(tape, loss)`` for a fresh forward pass; any randomness inside it
    has to be reseeded per call. Per-element error is ``|a - n| /
    max(1, |a|, |n|)``: relative for large gradients, absolute below
    magnitude one, where the finite-difference oracle's own roundoff
    floor would otherwise dominate a pure ratio.
    """
    params = list(params)
    _, first = loss_fn()
    _, second = loss_fn()
    if first.data.tobytes() != second.data.tobytes():
        raise DeterminismError("grad_check: two forward passes disagree; closure is not deterministic")

    for p in params:
        p.zero_grad()
    tape, loss = loss_fn()
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    report = GradCheckReport(tolerance=tolerance)
    for p in params:
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            _, lp = loss_fn()
            flat[i] = orig - step
            _, lm = loss_fn()
            flat[i] = orig
            num_flat[i] = (lp.item() - lm.item()) / (2.0 * step)
        a = analytic[p.name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1.0)
        rel = np.abs(a - numeric) / denom
        report.errors[p.name] = float(rel.max()) if rel.size else 0.0
    return report
