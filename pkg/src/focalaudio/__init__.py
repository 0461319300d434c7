"""Interpretable environmental sound classification with focal modulation networks."""

__version__ = "0.1.0"
