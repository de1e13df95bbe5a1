"""Attention cache and embedding extraction bridge."""

__version__ = "0.1.0"
