"""Generative recommendation with collaborative token IDs."""

__version__ = "0.1.0"
