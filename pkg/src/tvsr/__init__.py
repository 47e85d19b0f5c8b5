"""Volumetric super-resolution with a windowed-attention transformer."""

__version__ = "0.1.0"
