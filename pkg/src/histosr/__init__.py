"""Residual-learning U-Net super-resolution for histology images, in numpy."""

__version__ = "0.1.0"
