"""Geometrical optics for the fractional Helmholtz operator."""

__version__ = "0.1.0"
