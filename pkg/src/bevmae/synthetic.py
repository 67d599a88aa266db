"""Deterministic synthetic outdoor scenes with range-dependent sparsity.

Candidate points are drawn uniformly over a ground plane and over the
visible faces (four sides and top) of random boxes; each candidate survives
with probability ``min(1, (r0 / r) ** alpha)`` where ``r`` is its horizontal
distance to the sensor. The result thins out with range the way real
spinning-LiDAR returns do, without ray casting.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import GridSpec, PointCloud, grid_indices


@dataclass
class SceneConfig:
    n_objects: int = 8
    length_range: tuple = (1.0, 4.5)
    width_range: tuple = (0.6, 2.0)
    height_range: tuple = (0.5, 1.4)
    ground_extent: float = 22.0          # half-width of the square ground patch (m)
    sensor_origin: tuple = (0.0, 0.0)
    points_budget: int = 16000           # candidate draws before range thinning
    object_fraction: float = 0.35        # share of the budget spent on boxes
    falloff_alpha: float = 2.0
    falloff_r0: float = 5.0
    noise_sigma: float = 0.02
    min_object_range: float = 3.0
    seed: int = 0

    def __post_init__(self):
        for name in ("length_range", "width_range", "height_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be a positive (lo, hi) pair")
            setattr(self, name, (float(lo), float(hi)))
        if self.ground_extent <= 0 or self.falloff_r0 <= 0:
            raise ValueError("ground_extent and falloff_r0 must be positive")
        if self.falloff_alpha < 0 or self.noise_sigma < 0 or self.points_budget < 0 or self.n_objects < 0:
            raise ValueError("alpha, noise, budget and object count must be non-negative")
        self.sensor_origin = tuple(float(v) for v in self.sensor_origin)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


def _box_surface(rng, n, center, size, yaw):
    """``n`` uniform samples over the four sides and top of a yawed box."""
    l, w, h = size
    faces = np.array([l * h, l * h, w * h, w * h, l * w])
    face = rng.choice(5, size=n, p=faces / faces.sum())
    u = rng.uniform(-0.5, 0.5, n)
    v = rng.uniform(0.0, 1.0, n)
    local = np.empty((n, 3))
    # sides at +/- w/2 (along length), +/- l/2 (along width), top at z = h
    for f, (fx, fy) in enumerate(((None, 0.5), (None, -0.5), (0.5, None), (-0.5, None))):
        sel = face == f
        if fx is None:
            local[sel, 0] = u[sel] * l
            local[sel, 1] = fy * w
        else:
            local[sel, 0] = fx * l
            local[sel, 1] = u[sel] * w
        local[sel, 2] = v[sel] * h
    top = face == 4
    local[top, 0] = u[top] * l
    local[top, 1] = rng.uniform(-0.5, 0.5, int(top.sum())) * w
    local[top, 2] = h
    c, s = np.cos(yaw), np.sin(yaw)
    out = np.empty_like(local)
    out[:, 0] = center[0] + c * local[:, 0] - s * local[:, 1]
    out[:, 1] = center[1] + s * local[:, 0] + c * local[:, 1]
    out[:, 2] = local[:, 2]
    return out


def generate_scene(cfg: SceneConfig, spec: GridSpec = None) -> PointCloud:
    """Sample one scene. Points are clipped into ``spec``'s ranges (default grid)."""
    spec = spec or GridSpec()
    rng = np.random.default_rng(cfg.seed)
    ext = cfg.ground_extent
    ox, oy = cfg.sensor_origin
    n_obj_pts = int(round(cfg.points_budget * cfg.object_fraction)) if cfg.n_objects else 0
    n_ground = cfg.points_budget - n_obj_pts

    ground = np.column_stack([
        rng.uniform(ox - ext, ox + ext, n_ground),
        rng.uniform(oy - ext, oy + ext, n_ground),
        np.zeros(n_ground),
    ])
    parts = [ground]
    if cfg.n_objects and n_obj_pts:
        sizes = np.column_stack([rng.uniform(*cfg.length_range, cfg.n_objects),
                                 rng.uniform(*cfg.width_range, cfg.n_objects),
                                 rng.uniform(*cfg.height_range, cfg.n_objects)])
        radius = rng.uniform(cfg.min_object_range, ext - 2.5, cfg.n_objects)
        theta = rng.uniform(0, 2 * np.pi, cfg.n_objects)
        centers = np.column_stack([ox + radius * np.cos(theta), oy + radius * np.sin(theta)])
        yaws = rng.uniform(0, np.pi, cfg.n_objects)
        # budget split by surface area so all boxes are sampled at one areal density
        areas = 2 * sizes[:, 2] * (sizes[:, 0] + sizes[:, 1]) + sizes[:, 0] * sizes[:, 1]
        counts = rng.multinomial(n_obj_pts, areas / areas.sum())
        for k in range(cfg.n_objects):
            parts.append(_box_surface(rng, int(counts[k]), centers[k], sizes[k], yaws[k]))
    xyz = np.concatenate(parts) if parts else np.zeros((0, 3))

    r = np.hypot(xyz[:, 0] - ox, xyz[:, 1] - oy)
    with np.errstate(divide="ignore"):
        keep_p = np.minimum(1.0, (cfg.falloff_r0 / np.maximum(r, 1e-9)) ** cfg.falloff_alpha)
    keep = rng.uniform(0.0, 1.0, len(xyz)) < keep_p
    xyz = xyz[keep]
    xyz = xyz + rng.normal(0.0, cfg.noise_sigma, xyz.shape) if cfg.noise_sigma > 0 else xyz
    hi = np.nextafter(spec.maxs, -np.inf)
    xyz = np.clip(xyz, spec.mins, hi)
    intensity = rng.uniform(0.0, 1.0, len(xyz))
    return PointCloud(xyz, intensity, frame_id=f"synthetic-{cfg.seed}")


def range_binned_grid_density(cloud: PointCloud, spec: GridSpec, bins, origin=(0.0, 0.0)) -> np.ndarray:
    """Mean points per square meter over every BEV grid whose center falls in each range bin.

    Empty grids count as zero, so the value is an areal density per bin.
    """
    X, Y = spec.bev_shape
    counts = np.zeros((X, Y))
    idx, inside = grid_indices(cloud.xyz, spec)
    np.add.at(counts, (idx[inside, 0], idx[inside, 1]), 1.0)
    gx, gy = spec.grid_edge
    ci = spec.x_min + (np.arange(X) + 0.5) * gx
    cj = spec.y_min + (np.arange(Y) + 0.5) * gy
    rr = np.hypot(ci[:, None] - origin[0], cj[None, :] - origin[1])
    out = []
    for lo, hi in bins:
        sel = (rr >= lo) & (rr < hi)
        out.append(counts[sel].mean() / (gx * gy) if sel.any() else np.nan)
    return np.array(out)
