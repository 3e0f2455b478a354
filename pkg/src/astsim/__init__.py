"""Learned mesh simulation with a fixed budget of spatial tokens over an adaptive octree."""

__version__ = "0.1.0"
