"""Iterative human-in-the-loop segmentation toolkit for whole-slide images."""

__version__ = "0.1.0"
