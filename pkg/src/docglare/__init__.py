"""Block-wise glare detection for photographed documents."""

__version__ = "0.1.0"
