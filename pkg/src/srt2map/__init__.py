"""Super-resolution T2 mapping from orthogonal low-resolution slice stacks."""

__version__ = "0.1.0"
