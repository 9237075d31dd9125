"""Budgeted channel pruning by differentiable sparsity allocation."""

__version__ = "0.1.0"
