"""Sparse keypoint matching with linear-complexity attention."""

__version__ = "0.1.0"
