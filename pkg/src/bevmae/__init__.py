"""Masked BEV-grid autoencoder pre-training for LiDAR point clouds."""

from .geometry import GridIndex, GridSpec, Point, PointCloud, SparseTensor, VoxelIndex

__version__ = "0.1.0"

__all__ = ["GridIndex", "GridSpec", "Point", "PointCloud", "SparseTensor", "VoxelIndex"]
