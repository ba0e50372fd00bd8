"""Type-aware attention networks over heterogeneous graphs."""

__version__ = "0.1.0"
