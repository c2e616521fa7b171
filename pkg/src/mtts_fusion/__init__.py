"""Synthetic mixed-type time series generation and multimodal fusion forecasting."""

__version__ = "0.1.0"
