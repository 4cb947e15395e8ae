"""Knowledge-graph reasoning with a relational message-passing transformer."""

__version__ = "0.1.0"
