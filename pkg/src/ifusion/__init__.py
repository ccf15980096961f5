"""Multimodal HSI+LiDAR patch classifier built on a minimal autodiff core."""

__version__ = "0.1.0"
