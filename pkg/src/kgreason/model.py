"""The reasoning model: relational message passing, kernel attention, scoring.

A forward pass is conditioned on one query (head entity, query relation).
Each transformer layer runs two relational message-passing networks over
the full graph, one producing the attention's query/key inputs and one
(head-conditioned) producing its values, then mixes all entities with a
kernelized attention whose factored form costs O(|V| d^2 + |E| d).

The approximate kernel is ``1 + <q, k>`` on row-normalized projections,
the first-order surrogate for ``exp(<q, k>)``; the exponential kernel is
kept behind ``kernel_mode="full_exponential"`` and runs the quadratic
dense path (small graphs only).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Parameter, RowIndex, Tape, Tensor
from .data import KnowledgeGraph, Query

SEARCH_GRIDS = {
    "hidden_dim": (16, 32, 64),
    "attention_layers": (1, 2, 3),
    "query_layers": (1, 2, 3),
    "value_layers": (1, 2, 3),
}


class ConfigError(Exception):
    pass


class DenseScopeError(Exception):
    """The dense quadratic attention path refused an oversized graph."""


@dataclass
class ModelConfig:
    hidden_dim: int = 32
    attention_layers: int = 2
    query_layers: int = 2
    value_layers: int = 2
    mlp_depth: int = 3
    ffn_depth: int = 2
    ffn_multiplier: int = 4
    heads: int = 1
    kernel_mode: str = "approximate"
    noise_mode: str = "per_forward"
    noise_seed: int = 0
    precision: str = "float64"
    layer_norm_eps: float = 1e-5
    norm_eps: float = 1e-12
    dense_guard: int = 4096

    def validate(self) -> None:
        for name in ("hidden_dim", "attention_layers", "query_layers", "value_layers",
                     "mlp_depth", "ffn_depth", "ffn_multiplier", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kernel_mode not in ("approximate", "full_exponential"):
            raise ConfigError(f"unknown kernel_mode {self.kernel_mode!r}")
        if self.noise_mode not in ("per_forward", "fixed_seed", "disabled"):
            raise ConfigError(f"unknown noise_mode {self.noise_mode!r}")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    def grid_warnings(self) -> list[str]:
        """Values outside the default hyperparameter search grids (allowed, flagged)."""
        warnings = []
        for name, grid in SEARCH_GRIDS.items():
            if getattr(self, name) not in grid:
                warnings.append(f"{name}={getattr(self, name)} is outside the default grid {grid}")
        return warnings

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32


@dataclass
class Mlp:
    """Stack of linear layers with ReLU between them (last layer linear)."""

    weights: list
    biases: list

    def apply(self, tape: Tape, x: Tensor) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = tape.add(tape.matmul(x, w), b)
            if i < last:
                x = tape.relu(x)
        return x

    def parameters(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b


@dataclass
class RmpnnRound:
    retain: Parameter          # per-dimension gate on the previous state, init 1
    update: Mlp                # layer-specific update network

    def parameters(self):
        yield self.retain
        yield from self.update.parameters()


@dataclass
class RmpnnParams:
    """One relational message-passing network (either query- or value-side).

    ``rel_w``/``rel_b`` hold the per-edge-relation projections of the query
    relation embedding, shared across this network's rounds: column block r
    of ``rel_w`` is the d x d matrix for edge relation r.
    """

    proj_w: Parameter          # input projection, (2d, d)
    proj_b: Parameter
    rel_w: Parameter           # (d, R*d)
    rel_b: Parameter           # (R, d)
    rounds: list

    def parameters(self):
        yield self.proj_w
        yield self.proj_b
        yield self.rel_w
        yield self.rel_b
        for r in self.rounds:
            yield from r.parameters()


@dataclass
class AttentionHeadParams:
    query_net: RmpnnParams
    value_net: RmpnnParams
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    def parameters(self):
        yield from self.query_net.parameters()
        yield from self.value_net.parameters()
        yield from (self.w1, self.b1, self.w2, self.b2)


@dataclass
class LayerParams:
    heads: list
    ln1_gain: Parameter
    ln1_bias: Parameter
    ln2_gain: Parameter
    ln2_bias: Parameter
    ffn: Mlp
    merge_w: Optional[Parameter] = None    # only with multiple heads (experimental)
    merge_b: Optional[Parameter] = None

    def parameters(self):
        for h in self.heads:
            yield from h.parameters()
        if self.merge_w is not None:
            yield self.merge_w
            yield self.merge_b
        yield from (self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias)
        yield from self.ffn.parameters()


class ModelParams:
    """All learnable state, addressable by stable name paths."""

    def __init__(self, config: ModelConfig, num_relations: int, rng: np.random.Generator):
        config.validate()
        d = config.hidden_dim
        dt = config.dtype
        std = 1.0 / np.sqrt(d)
        self.num_relations = num_relations
        self.config = config

        def weight(name, rows, cols):
            return Parameter(name, rng.normal(0.0, std, size=(rows, cols)).astype(dt))

        def zeros(name, rows, cols):
            return Parameter(name, np.zeros((rows, cols), dtype=dt))

        def ones(name, rows, cols):
            return Parameter(name, np.ones((rows, cols), dtype=dt))

        def mlp(prefix, dims):
            ws = [weight(f"{prefix}.w{i}", dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
            bs = [zeros(f"{prefix}.b{i}", 1, dims[i + 1]) for i in range(len(dims) - 1)]
            return Mlp(ws, bs)

        def rmpnn(prefix, num_rounds):
            rounds = [
                RmpnnRound(
                    ones(f"{prefix}.round{i}.retain", 1, d),
                    mlp(f"{prefix}.round{i}.update", [d] * (config.mlp_depth + 1)),
                )
                for i in range(num_rounds)
            ]
            return RmpnnParams(
                proj_w=weight(f"{prefix}.proj_w", 2 * d, d),
                proj_b=zeros(f"{prefix}.proj_b", 1, d),
                rel_w=weight(f"{prefix}.rel_w", d, num_relations * d),
                rel_b=zeros(f"{prefix}.rel_b", num_relations, d),
                rounds=rounds,
            )

        self.relations = weight("relations", num_relations, d)
        self.layers = []
        for li in range(config.attention_layers):
            pre = f"layer{li}"
            heads = []
            for hi in range(config.heads):
                hp = f"{pre}.head{hi}"
                heads.append(AttentionHeadParams(
                    query_net=rmpnn(f"{hp}.query", config.query_layers),
                    value_net=rmpnn(f"{hp}.value", config.value_layers),
                    w1=weight(f"{hp}.w1", d, d),
                    b1=zeros(f"{hp}.b1", 1, d),
                    w2=weight(f"{hp}.w2", d, d),
                    b2=zeros(f"{hp}.b2", 1, d),
                ))
            ffn_dims = [d] + [config.ffn_multiplier * d] * (config.ffn_depth - 1) + [d]
            layer = LayerParams(
                heads=heads,
                ln1_gain=ones(f"{pre}.ln1.gain", 1, d),
                ln1_bias=zeros(f"{pre}.ln1.bias", 1, d),
                ln2_gain=ones(f"{pre}.ln2.gain", 1, d),
                ln2_bias=zeros(f"{pre}.ln2.bias", 1, d),
                ffn=mlp(f"{pre}.ffn", ffn_dims),
            )
            if config.heads > 1:
                layer.merge_w = weight(f"{pre}.merge_w", config.heads * d, d)
                layer.merge_b = zeros(f"{pre}.merge_b", 1, d)
            self.layers.append(layer)
        self.scorer = mlp("scorer", [d, d, 1])

    def parameters(self) -> list[Parameter]:
        out = [self.relations]
        for layer in self.layers:
            out.extend(layer.parameters())
        out.extend(self.scorer.parameters())
        return out

    def by_name(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


# --- kernels ---------------------------------------------------------------


def approximate_kernel(q: np.ndarray, k: np.ndarray) -> float:
    """First-order surrogate similarity of two unit vectors, in [0, 2]."""
    return 1.0 + float(np.dot(np.ravel(q), np.ravel(k)))


def exponential_kernel(q: np.ndarray, k: np.ndarray) -> float:
    return float(np.exp(np.dot(np.ravel(q), np.ravel(k))))


# --- message passing -------------------------------------------------------


def relation_transform(tape: Tape, relations: Parameter, rq: int, net: RmpnnParams) -> Tensor:
    """Per-relation message vectors r_hat[r] = R[rq] @ W_r + b_r, as an (R, d) block."""
    num_rel, d = net.rel_b.shape
    rq_row = tape.gather_rows(relations, RowIndex([rq]))
    return tape.add(tape.reshape(tape.matmul(rq_row, net.rel_w), (num_rel, d)), net.rel_b)


def relational_message(tape: Tape, z: Tensor, relation: int, rq: int,
                       relations: Parameter, net: RmpnnParams) -> Tensor:
    """Messages for a batch of source states under one edge relation: z * r_hat."""
    rhat = relation_transform(tape, relations, rq, net)
    row = tape.gather_rows(rhat, RowIndex([relation]))
    return tape.mul(z, row)


def rmpnn_forward(tape: Tape, graph: KnowledgeGraph, x: Tensor, rq: int,
                  relations: Parameter, net: RmpnnParams, init_extra: np.ndarray,
                  exclude=None) -> Tensor:
    """Run one relational MPNN: project [x, extra], then message/update rounds.

    Messages flow along stored facts r(v, u) from v into u; aggregation is
    gather source rows -> per-relation transform -> segment-sum to targets.
    ``exclude`` is an optional (sources, relations, targets) triple of edge
    copies whose contribution is subtracted out after aggregation (used to
    drop a training query's own edge without touching the full edge list).
    """
    n = graph.num_entities
    z = tape.add(tape.matmul(tape.concat_columns(x, tape.tensor(init_extra)), net.proj_w), net.proj_b)
    rhat = relation_transform(tape, relations, rq, net)
    rhat_edges = tape.gather_rows(rhat, graph.in_rel)
    if exclude is not None:
        ex_src, ex_rel, ex_tgt = (RowIndex(ix) for ix in exclude)
    for rnd in net.rounds:
        src = tape.gather_rows(z, graph.in_src)
        agg = tape.scatter_add_rows(n, graph.in_tgt, tape.mul(src, rhat_edges))
        if exclude is not None:
            leak = tape.mul(tape.gather_rows(z, ex_src), tape.gather_rows(rhat, ex_rel))
            agg = tape.add(agg, tape.scale(tape.scatter_add_rows(n, ex_tgt, leak), -1.0))
        z = rnd.update.apply(tape, tape.add(tape.mul(z, rnd.retain), agg))
    return z


def qrmpnn_forward(tape: Tape, graph: KnowledgeGraph, x: Tensor, rq: int,
                   relations: Parameter, net: RmpnnParams, noise: np.ndarray,
                   exclude=None) -> Tensor:
    """Query-side MPNN: the initial state concatenates per-entity Gaussian noise."""
    return rmpnn_forward(tape, graph, x, rq, relations, net, noise, exclude)


def vrmpnn_forward(tape: Tape, graph: KnowledgeGraph, x: Tensor, rq: int, head: int,
                   relations: Parameter, net: RmpnnParams,
                   exclude=None) -> Tensor:
    """Value-side MPNN: the initial state concatenates an all-ones head indicator."""
    if not 0 <= head < graph.num_entities:
        raise ConfigError(f"head entity {head} out of range")
    d = net.proj_b.shape[1]
    indicator = np.zeros((graph.num_entities, d), dtype=x.data.dtype)
    indicator[head] = 1.0
    return rmpnn_forward(tape, graph, x, rq, relations, net, indicator, exclude)


# --- attention -------------------------------------------------------------


def _projected_qk(tape: Tape, ztilde: Tensor, head: AttentionHeadParams, eps: float):
    q = tape.row_l2_normalize(tape.add(tape.matmul(ztilde, head.w1), head.b1), eps)
    k = tape.row_l2_normalize(tape.add(tape.matmul(ztilde, head.w2), head.b2), eps)
    return q, k


def linear_attention(tape: Tape, ztilde: Tensor, zhat: Tensor,
                     head: AttentionHeadParams, eps: float = 1e-12) -> Tensor:
    """Kernelized all-pair mixing in factored O(|V| d^2) order.

    Equivalent to dense attention with effective score
    ``kernel(q_u, k_v) + |V| * [u == v]`` row-normalized: the value term
    outside the division carries the |V|-weighted self contribution.
    """
    n = ztilde.shape[0]
    if n == 0:
        return zhat
    dt = ztilde.data.dtype
    q, k = _projected_qk(tape, ztilde, head, eps)
    v = zhat
    colsum_k = tape.scale(tape.mean_rows(k), n)                 # 1^T K, (1, d)
    qk1 = tape.matmul(q, tape.transpose(colsum_k))              # Q (K^T 1), (n, 1)
    denom = tape.add(tape.scale(qk1, 1.0 / n), tape.tensor(np.full((1, 1), 2.0, dtype=dt)))
    ktv = tape.matmul(tape.transpose(k), v)                     # K^T V, (d, d)
    qktv = tape.matmul(q, ktv)                                  # (n, d)
    colsum_v = tape.scale(tape.mean_rows(v), n)                 # 1^T V, (1, d)
    mixed = tape.add(v, tape.scale(tape.add(qktv, colsum_v), 1.0 / n))
    return tape.mul(mixed, tape.reciprocal(denom))


def dense_attention(tape: Tape, ztilde: Tensor, zhat: Tensor, head: AttentionHeadParams,
                    kernel_mode: str, eps: float = 1e-12, guard: int = 4096) -> Tensor:
    """Explicit |V| x |V| attention (differentiable); the full-exponential route."""
    n = ztilde.shape[0]
    if n > guard:
        raise DenseScopeError(f"dense attention refused: {n} entities > guard {guard}")
    if n == 0:
        return zhat
    dt = ztilde.data.dtype
    q, k = _projected_qk(tape, ztilde, head, eps)
    s = tape.matmul(q, tape.transpose(k))
    if kernel_mode == "full_exponential":
        scores = tape.exp(s)
    else:
        scores = tape.add(s, tape.tensor(np.ones((1, 1), dtype=dt)))
    scores = tape.add(scores, tape.tensor(n * np.eye(n, dtype=dt)))
    rowsum = tape.matmul(scores, tape.tensor(np.ones((n, 1), dtype=dt)))
    attn = tape.mul(scores, tape.reciprocal(rowsum))
    return tape.matmul(attn, zhat)


def _rownorm_np(a: np.ndarray, eps: float) -> np.ndarray:
    return a / np.sqrt((a * a).sum(axis=1, keepdims=True) + eps)


def dense_attention_oracle(ztilde: np.ndarray, zhat: np.ndarray, head: AttentionHeadParams,
                           kernel_mode: str = "approximate", eps: float = 1e-12,
                           guard: int = 4096):
    """Independent dense reference: returns (mixed values, attention matrix).

    Pure numpy, no tape; attention rows are the normalized effective scores
    ``kernel + |V| * I`` and sum to one. Refuses graphs above ``guard``.
    """
    n = ztilde.shape[0]
    if n > guard:
        raise DenseScopeError(f"oracle refused: {n} entities > guard {guard}")
    q = _rownorm_np(ztilde @ head.w1.data + head.b1.data, eps)
    k = _rownorm_np(ztilde @ head.w2.data + head.b2.data, eps)
    s = q @ k.T
    scores = np.exp(s) if kernel_mode == "full_exponential" else 1.0 + s
    scores = scores + n * np.eye(n, dtype=scores.dtype)
    attn = scores / scores.sum(axis=1, keepdims=True)
    return attn @ zhat, attn


# --- transformer stack -----------------------------------------------------


@dataclass
class ForwardState:
    """Intermediate matrices captured for diagnostics (numpy copies)."""

    noise: np.ndarray = None
    x: list = field(default_factory=list)                # X^(0..L)
    query_reprs: list = field(default_factory=list)      # [layer][head]
    value_reprs: list = field(default_factory=list)
    attended: list = field(default_factory=list)


def make_noise(config: ModelConfig, num_entities: int,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One (|V|, d) noise draw per forward pass, per the configured mode.

    ``fixed_seed`` regenerates the same draw every call so evaluation is
    deterministic and rank-stable across queries.
    """
    shape = (num_entities, config.hidden_dim)
    if config.noise_mode == "disabled":
        return np.zeros(shape, dtype=config.dtype)
    if config.noise_mode == "fixed_seed":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.noise_seed)))
    elif rng is None:
        raise ConfigError("noise_mode=per_forward requires an rng stream")
    return rng.standard_normal(shape).astype(config.dtype)


def transformer_layer(tape: Tape, graph: KnowledgeGraph, x: Tensor, query: Query,
                      relations: Parameter, layer: LayerParams, config: ModelConfig,
                      noise: np.ndarray, exclude=None,
                      state: Optional[ForwardState] = None) -> Tensor:
    """One attention block: Attn -> residual -> LN -> FFN -> residual -> LN."""
    outs = []
    q_reprs, v_reprs, att_outs = [], [], []
    for head in layer.heads:
        ztilde = qrmpnn_forward(tape, graph, x, query.relation, relations, head.query_net, noise, exclude)
        zhat = vrmpnn_forward(tape, graph, x, query.relation, query.head, relations, head.value_net, exclude)
        if config.kernel_mode == "approximate":
            zbar = linear_attention(tape, ztilde, zhat, head, config.norm_eps)
        else:
            zbar = dense_attention(tape, ztilde, zhat, head, config.kernel_mode,
                                   config.norm_eps, config.dense_guard)
        outs.append(zbar)
        if state is not None:
            q_reprs.append(ztilde.data.copy())
            v_reprs.append(zhat.data.copy())
            att_outs.append(zbar.data.copy())
    if len(outs) == 1:
        attn_out = outs[0]
    else:
        cat = outs[0]
        for o in outs[1:]:
            cat = tape.concat_columns(cat, o)
        attn_out = tape.add(tape.matmul(cat, layer.merge_w), layer.merge_b)
    a = tape.layer_norm(tape.add(x, attn_out), layer.ln1_gain, layer.ln1_bias, config.layer_norm_eps)
    out = tape.layer_norm(tape.add(a, layer.ffn.apply(tape, a)),
                          layer.ln2_gain, layer.ln2_bias, config.layer_norm_eps)
    if state is not None:
        state.query_reprs.append(q_reprs)
        state.value_reprs.append(v_reprs)
        state.attended.append(att_outs)
        state.x.append(out.data.copy())
    return out


def forward(tape: Tape, graph: KnowledgeGraph, query: Query, params: ModelParams,
            config: ModelConfig, noise: Optional[np.ndarray] = None,
            exclude_query_edge: bool = False, state: Optional[ForwardState] = None) -> Tensor:
    """Score every entity as a tail for the query: sigmoid(MLP(X^(L))), shape (|V|, 1)."""
    n = graph.num_entities
    if not 0 <= query.head < n:
        raise ConfigError(f"query head {query.head} out of range")
    if not 0 <= query.relation < graph.num_relations:
        raise ConfigError(f"query relation {query.relation} out of range")
    if noise is None:
        noise = make_noise(config, n)
    exclude = None
    if exclude_query_edge:
        exclude = graph.excluded_edge_endpoints(query.head, query.relation, query.gold_tail)
    x = tape.tensor(np.zeros((n, config.hidden_dim), dtype=config.dtype))
    if state is not None:
        state.noise = noise.copy()
        state.x.append(x.data.copy())
    for layer in params.layers:
        x = transformer_layer(tape, graph, x, query, params.relations, layer, config, noise, exclude, state)
    return tape.sigmoid(params.scorer.apply(tape, x))


def score_query(graph: KnowledgeGraph, query: Query, params: ModelParams, config: ModelConfig,
                noise: Optional[np.ndarray] = None, exclude_query_edge: bool = False) -> np.ndarray:
    """Inference-only forward; returns a flat (|V|,) probability vector."""
    tape = Tape(grad=False)
    scores = forward(tape, graph, query, params, config, noise, exclude_query_edge)
    return scores.data[:, 0].copy()
