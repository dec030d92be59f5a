"""Boundary segmentation toolkit for perineural-invasion style contact lines."""

__version__ = "0.1.0"
