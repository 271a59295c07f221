"""Hybrid ANN/SNN event-based semantic segmentation, desk scale."""

__version__ = "0.1.0"
