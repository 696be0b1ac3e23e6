"""Rare life event detection in daily behavioral time series."""

__version__ = "0.1.0"
