"""Active object reconstruction with a hash-grid occupancy field and gradient-based next-best-view search."""

__version__ = "0.1.0"
