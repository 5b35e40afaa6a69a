"""Autoregressive pixel-level video models on a from-scratch float64 autograd core."""

__version__ = "0.1.0"
