"""Mini-batch GNN training with topological compensation of out-of-batch messages."""

__version__ = "0.1.0"
