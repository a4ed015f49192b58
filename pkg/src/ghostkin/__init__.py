"""Kinetic and fluid toolkit for ghost-effect gas dynamics in a slab."""

__version__ = "0.1.0"
