"""Disentangled appearance/structure codes for paired RGB and depth images."""

__version__ = "0.1.0"
