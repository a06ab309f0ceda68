"""Session-based next-item recommendation with two-stage preference evolution."""

__version__ = "0.1.0"
