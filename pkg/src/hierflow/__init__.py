"""Hierarchical graph forecasting for count time series."""

__version__ = "0.1.0"
