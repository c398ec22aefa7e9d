"""Batch analysis of embedded web interfaces in unpacked firmware images."""

__version__ = "0.1.0"
