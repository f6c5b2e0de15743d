"""Forking-sequences and window-sampling quantile forecasting."""

__version__ = "0.1.0"
