"""Differentiable architecture search for small-image segmentation."""

__version__ = "0.1.0"
