"""Learned registration of raw 3D face scans onto a fixed template mesh."""

__version__ = "0.1.0"
