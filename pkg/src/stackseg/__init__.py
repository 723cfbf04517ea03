"""Stacked U-Net segmentation of aerial imagery on a small numpy tensor engine."""

__version__ = "0.1.0"
