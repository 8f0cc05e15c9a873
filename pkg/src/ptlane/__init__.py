"""Consecutive differentiable perspective transforms for lane segmentation."""

__version__ = "0.1.0"
