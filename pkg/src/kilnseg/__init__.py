"""Differentiable slag segmentation toolkit on synthetic kiln imagery."""

__version__ = "0.1.0"
