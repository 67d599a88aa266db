"""Voxel and BEV-grid bookkeeping for metric point clouds.

All binning uses half-open intervals ``[lo, hi)`` anchored at the range
minimum, so a point on an interior cell boundary belongs to the higher cell
and a point at ``x_max`` is out of range.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float = 0.0


class GridIndex(NamedTuple):
    i: int
    j: int


class VoxelIndex(NamedTuple):
    ix: int
    iy: int
    iz: int


@dataclass
class PointCloud:
    """Flat, ordered set of points stored column-wise.

    ``xyz`` is ``(N, 3)`` float64, ``intensity`` is ``(N,)``.
    """

    xyz: np.ndarray
    intensity: np.ndarray = None
    frame_id: str = ""

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if self.intensity is None:
            self.intensity = np.zeros(len(self.xyz))
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(self.intensity) != len(self.xyz):
            raise ValueError("intensity length does not match point count")
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")

    @classmethod
    def from_points(cls, points: Sequence[Point], frame_id: str = "") -> "PointCloud":
        if len(points) == 0:
            return cls(np.zeros((0, 3)), np.zeros(0), frame_id)
        arr = np.array([tuple(Point(*p)) for p in points], dtype=np.float64)
        return cls(arr[:, :3], arr[:, 3], frame_id)

    @classmethod
    def empty(cls, frame_id: str = "") -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), frame_id)

    def __len__(self) -> int:
        return len(self.xyz)

    def point(self, k: int) -> Point:
        x, y, z = self.xyz[k]
        return Point(float(x), float(y), float(z), float(self.intensity[k]))

    def points(self) -> list[Point]:
        return [self.point(k) for k in range(len(self))]

    def subset(self, ordinals) -> "PointCloud":
        """Points at ``ordinals``, in the order given."""
        idx = np.asarray(ordinals, dtype=np.int64)
        return PointCloud(self.xyz[idx], self.intensity[idx], self.frame_id)


@dataclass(frozen=True)
class GridSpec:
    x_min: float = -22.4
    x_max: float = 22.4
    y_min: float = -22.4
    y_max: float = 22.4
    z_min: float = -0.3
    z_max: float = 1.5
    voxel_size: tuple = (0.1, 0.1, 0.15)
    downsample_d: int = 8

    def __post_init__(self):
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        self.validate()

    def validate(self) -> None:
        if not (self.x_max > self.x_min and self.y_max > self.y_min and self.z_max > self.z_min):
            raise ValueError("grid ranges must be non-degenerate")
        if any(v <= 0 for v in self.voxel_size) or len(self.voxel_size) != 3:
            raise ValueError("voxel_size must be three positive values")
        if int(self.downsample_d) != self.downsample_d or self.downsample_d < 1:
            raise ValueError("downsample_d must be a positive integer")
        vx, vy, vz = self.voxel_size
        d = self.downsample_d
        for name, extent, edge in (
            ("x", self.x_max - self.x_min, d * vx),
            ("y", self.y_max - self.y_min, d * vy),
            ("z", self.z_max - self.z_min, vz),
        ):
            n = extent / edge
            if abs(n - round(n)) > 1e-6 or round(n) < 1:
                raise ValueError(f"{name} range is not a whole number of cells of edge {edge}")

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def maxs(self) -> np.ndarray:
        return np.array([self.x_max, self.y_max, self.z_max])

    @property
    def voxel_shape(self) -> tuple[int, int, int]:
        ext = self.maxs - self.mins
        return tuple(int(round(e / v)) for e, v in zip(ext, self.voxel_size))

    @property
    def bev_shape(self) -> tuple[int, int]:
        nx, ny, _ = self.voxel_shape
        return nx // self.downsample_d, ny // self.downsample_d

    @property
    def grid_edge(self) -> tuple[float, float]:
        return self.downsample_d * self.voxel_size[0], self.downsample_d * self.voxel_size[1]

    @property
    def voxel_volume(self) -> float:
        vx, vy, vz = self.voxel_size
        return vx * vy * vz

    def grid_center(self, grid) -> np.ndarray:
        gx, gy = self.grid_edge
        return np.array([self.x_min + (grid[0] + 0.5) * gx, self.y_min + (grid[1] + 0.5) * gy])

    def to_dict(self) -> dict:
        return {
            "x_min": self.x_min, "x_max": self.x_max,
            "y_min": self.y_min, "y_max": self.y_max,
            "z_min": self.z_min, "z_max": self.z_max,
            "voxel_size": list(self.voxel_size),
            "downsample_d": int(self.downsample_d),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        d["voxel_size"] = tuple(d["voxel_size"])
        return cls(**d)


def voxel_indices(xyz: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised voxel binning: ``(M, 3)`` int64 indices and in-range mask.

    Cell ``k`` along an axis covers ``[lo + k*v, lo + (k+1)*v)`` with the
    boundaries evaluated in floating point exactly as written, so a point
    constructed as ``lo + k*v`` always lands in cell ``k``.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    lo = spec.mins
    size = np.asarray(spec.voxel_size)
    shape = np.asarray(spec.voxel_shape)
    inside = np.all((xyz >= lo) & (xyz < spec.maxs), axis=1)
    idx = np.floor((xyz - lo) / size).astype(np.int64)
    idx += (lo + (idx + 1) * size <= xyz)
    idx -= (lo + idx * size > xyz)
    idx = np.clip(idx, 0, shape - 1)
    return idx, inside


def grid_indices(xyz: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised BEV binning: ``(M, 2)`` int64 indices and in-range mask.

    Defined as voxel index floor-divided by ``d`` so the two never disagree.
    """
    vidx, inside = voxel_indices(xyz, spec)
    return vidx[:, :2] // spec.downsample_d, inside


def grid_index_of(p, spec: GridSpec) -> Optional[GridIndex]:
    """BEV grid containing ``p``, or ``None`` when ``p`` is out of range."""
    idx, inside = grid_indices(np.array(p[:3], dtype=np.float64), spec)
    if not inside[0]:
        return None
    return GridIndex(int(idx[0, 0]), int(idx[0, 1]))


def voxel_index_of(p, spec: GridSpec) -> Optional[VoxelIndex]:
    idx, inside = voxel_indices(np.array(p[:3], dtype=np.float64), spec)
    if not inside[0]:
        return None
    return VoxelIndex(*(int(v) for v in idx[0]))


@dataclass
class Occupancy:
    """Non-empty BEV grids mapped to ascending point ordinals."""

    buckets: dict = field(default_factory=dict)
    dropped: int = 0
    n_points: int = 0

    def __len__(self) -> int:
        return len(self.buckets)

    def __getitem__(self, g) -> list[int]:
        return self.buckets[GridIndex(*g)]

    def __contains__(self, g) -> bool:
        return GridIndex(*g) in self.buckets

    def keys(self) -> list[GridIndex]:
        return sorted(self.buckets)

    def items(self):
        return ((g, self.buckets[g]) for g in self.keys())

    @property
    def n_in_range(self) -> int:
        return self.n_points - self.dropped


def build_bev_occupancy(cloud: PointCloud, spec: GridSpec) -> Occupancy:
    idx, inside = grid_indices(cloud.xyz, spec)
    occ = Occupancy(dropped=int((~inside).sum()), n_points=len(cloud))
    ordinals = np.flatnonzero(inside)
    if len(ordinals) == 0:
        return occ
    _, ny = spec.bev_shape
    keys = idx[ordinals, 0] * ny + idx[ordinals, 1]
    # stable sort keeps ordinals ascending inside each bucket
    order = np.argsort(keys, kind="stable")
    keys, ordinals = keys[order], ordinals[order]
    uniq, starts = np.unique(keys, return_index=True)
    ends = np.append(starts[1:], len(keys))
    for key, s, e in zip(uniq, starts, ends):
        occ.buckets[GridIndex(int(key // ny), int(key % ny))] = ordinals[s:e].tolist()
    return occ


@dataclass
class SparseTensor:
    """Active voxel sites with one feature row per site.

    ``sites`` is ``(M, 3)`` int64, strictly lexicographically sorted.
    ``features`` is an ``(M, C)`` array or an autodiff ``Tensor``.
    """

    sites: np.ndarray
    features: object
    shape: tuple

    def __post_init__(self):
        self.sites = np.asarray(self.sites, dtype=np.int64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.sites)

    @property
    def channels(self) -> int:
        return self.shape[3]

    def keys(self) -> np.ndarray:
        return site_keys(self.sites, self.shape[:3])

    def feature_array(self) -> np.ndarray:
        return self.features if isinstance(self.features, np.ndarray) else self.features.data


def site_keys(sites: np.ndarray, spatial_shape) -> np.ndarray:
    """Linear keys whose ordering equals lexicographic (ix, iy, iz) order."""
    _, ny, nz = spatial_shape
    sites = np.asarray(sites, dtype=np.int64).reshape(-1, 3)
    return (sites[:, 0] * ny + sites[:, 1]) * nz + sites[:, 2]


def keys_to_sites(keys: np.ndarray, spatial_shape) -> np.ndarray:
    _, ny, nz = spatial_shape
    keys = np.asarray(keys, dtype=np.int64)
    return np.stack([keys // (ny * nz), (keys // nz) % ny, keys % nz], axis=1)


def voxelize_mean(cloud: PointCloud, spec: GridSpec) -> SparseTensor:
    """Mean-pooled ``[x_off, y_off, z_off, intensity]`` per occupied voxel.

    Offsets are measured from the voxel center in units of voxel size, so
    each lies in ``[-0.5, 0.5]``.
    """
    shape = spec.voxel_shape
    vidx, inside = voxel_indices(cloud.xyz, spec)
    vidx = vidx[inside]
    xyz = cloud.xyz[inside]
    inten = cloud.intensity[inside]
    if len(xyz) == 0:
        return SparseTensor(np.zeros((0, 3), np.int64), np.zeros((0, 4)), shape + (4,))
    size = np.asarray(spec.voxel_size)
    centers = spec.mins + (vidx + 0.5) * size
    per_point = np.column_stack([(xyz - centers) / size, inten])
    keys = site_keys(vidx, shape)
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    sums = np.zeros((len(uniq), 4))
    np.add.at(sums, inverse, per_point)
    feats = sums / counts[:, None]
    return SparseTensor(keys_to_sites(uniq, shape), feats, shape + (4,))
