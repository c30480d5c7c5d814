"""Meta-learned group sparsity for multi-task models, desk scale."""

__version__ = "0.1.0"
