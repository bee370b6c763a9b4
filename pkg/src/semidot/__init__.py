"""Semi-discrete optimal transport on a box times a weighted graph."""

__version__ = "0.1.0"
