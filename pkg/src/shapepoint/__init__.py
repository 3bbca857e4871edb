"""Adversarial shape learning for volumetric segmentation on synthetic 3D organs."""

__version__ = "0.1.0"
