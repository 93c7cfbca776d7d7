"""Multi-task elastic supernet training, rank-based search and sub-network extraction."""

__version__ = "0.1.0"
