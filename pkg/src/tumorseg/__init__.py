"""Patch-based 3D brain tumor segmentation with voxel-wise uncertainty."""

__version__ = "0.1.0"
