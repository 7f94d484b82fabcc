"""Physically-based neural shading over a geometry-anchored density field."""

__version__ = "0.1.0"
