"""Reconstruction and density targets, Chamfer and Smooth-L1 losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, scale
from .geometry import GridSpec, PointCloud, voxel_indices


@dataclass
class GridTargets:
    """Ground truth for each masked grid, in sorted grid order."""

    grids: list
    offsets: list          # per grid: (N, 3) normalized offsets
    density: np.ndarray    # per grid: points per cubic meter

    def __len__(self) -> int:
        return len(self.grids)


def normalized_offsets(xyz: np.ndarray, grid, spec: GridSpec) -> np.ndarray:
    """Offsets from the grid center scaled by the grid edge.

    x and y are divided by the BEV grid edge; z is measured from the middle
    of the z range and divided by the full z extent.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    cx, cy = spec.grid_center(grid)
    gx, gy = spec.grid_edge
    zc = 0.5 * (spec.z_min + spec.z_max)
    zext = spec.z_max - spec.z_min
    return np.column_stack([(xyz[:, 0] - cx) / gx, (xyz[:, 1] - cy) / gy, (xyz[:, 2] - zc) / zext])


def denormalize_offsets(offsets: np.ndarray, grid, spec: GridSpec) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    cx, cy = spec.grid_center(grid)
    gx, gy = spec.grid_edge
    zc = 0.5 * (spec.z_min + spec.z_max)
    zext = spec.z_max - spec.z_min
    return np.column_stack([offsets[:, 0] * gx + cx, offsets[:, 1] * gy + cy, offsets[:, 2] * zext + zc])


def density_target(xyz: np.ndarray, grid, spec: GridSpec) -> float:
    """Point count over occupied volume (occupied voxels times voxel volume)."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if len(xyz) == 0:
        raise ValueError("density target needs at least one point")
    vidx, _ = voxel_indices(xyz, spec)
    n_occupied = len(np.unique(vidx, axis=0))
    return len(xyz) / (n_occupied * spec.voxel_volume)


def build_targets(masked_points_by_grid: dict, spec: GridSpec) -> GridTargets:
    grids = sorted(masked_points_by_grid)
    offsets, density = [], []
    for g in grids:
        pts = masked_points_by_grid[g]
        xyz = pts.xyz if isinstance(pts, PointCloud) else np.array([p[:3] for p in pts], dtype=np.float64)
        offsets.append(normalized_offsets(xyz, g, spec))
        density.append(density_target(xyz, g, spec))
    return GridTargets(grids, offsets, np.array(density, dtype=np.float64))


def scene_targets(cloud: PointCloud, occupancy, spec: GridSpec) -> dict:
    """Targets for every non-empty grid at once: ``grid -> (offsets, density)``.

    Vectorised equivalent of :func:`build_targets` applied to all grids; the
    result does not depend on the mask, so callers cache it per scene.
    """
    out = {}
    grids = occupancy.keys()
    if not grids:
        return out
    ords = np.concatenate([occupancy[g] for g in grids])
    sizes = np.array([len(occupancy[g]) for g in grids])
    gid = np.repeat(np.arange(len(grids)), sizes)
    xyz = cloud.xyz[ords]
    gx, gy = spec.grid_edge
    garr = np.array(grids, dtype=np.float64)
    centers = np.column_stack([spec.x_min + (garr[:, 0] + 0.5) * gx, spec.y_min + (garr[:, 1] + 0.5) * gy])[gid]
    zc = 0.5 * (spec.z_min + spec.z_max)
    zext = spec.z_max - spec.z_min
    offs = np.column_stack([(xyz[:, 0] - centers[:, 0]) / gx, (xyz[:, 1] - centers[:, 1]) / gy,
                            (xyz[:, 2] - zc) / zext])
    vidx, _ = voxel_indices(xyz, spec)
    nx, ny, nz = spec.voxel_shape
    vkey = (vidx[:, 0] * ny + vidx[:, 1]) * nz + vidx[:, 2]
    pairs = np.unique(np.column_stack([gid, vkey]), axis=0)
    occupied = np.bincount(pairs[:, 0], minlength=len(grids))
    density = sizes / (occupied * spec.voxel_volume)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    for k, g in enumerate(grids):
        out[g] = (offs[bounds[k]:bounds[k + 1]], float(density[k]))
    return out


def targets_for(grids, cached: dict) -> GridTargets:
    grids = sorted(grids)
    return GridTargets(grids, [cached[g][0] for g in grids], np.array([cached[g][1] for g in grids]))


# ---------------------------------------------------------------- Chamfer

def _sq_dists(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = p[:, None, :] - q[None, :, :]
    return (diff * diff).sum(axis=2)


def chamfer(p: np.ndarray, p_hat: np.ndarray) -> float:
    """Symmetric squared-distance Chamfer between ``(L, 3)`` and ``(N, 3)``."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    p_hat = np.asarray(p_hat, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0 or len(p_hat) == 0:
        raise ValueError("chamfer needs non-empty sets")
    d = _sq_dists(p, p_hat)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def chamfer_with_grad(p: np.ndarray, p_hat: np.ndarray):
    """Chamfer value, its gradient w.r.t. ``p``, and the argmin choices.

    The nearest-neighbour assignment is held fixed (ties resolve to the
    lowest index), which gives the usual subgradient.
    """
    p = np.asarray(p, dtype=np.float64)
    d = _sq_dists(p, p_hat)
    L, N = d.shape
    nn_pred = d.argmin(axis=1)      # for each prediction, closest target
    nn_gt = d.argmin(axis=0)        # for each target, closest prediction
    value = d[np.arange(L), nn_pred].mean() + d[nn_gt, np.arange(N)].mean()
    grad = (2.0 / L) * (p - p_hat[nn_pred])
    np.add.at(grad, nn_gt, (2.0 / N) * (p[nn_gt] - p_hat))
    return float(value), grad, np.concatenate([nn_pred, nn_gt])


def _chamfer_padded(pred: np.ndarray, targets: list):
    M, L, _ = pred.shape
    sizes = np.array([len(t) for t in targets])
    nmax = int(sizes.max())
    tgt = np.zeros((M, nmax, 3))
    valid = np.arange(nmax)[None, :] < sizes[:, None]
    for r, t in enumerate(targets):
        tgt[r, :len(t)] = t
    diff = pred[:, :, None, :] - tgt[:, None, :, :]
    d = (diff * diff).sum(axis=3)                        # (M, L, N)
    nn_pred = np.where(valid[:, None, :], d, np.inf).argmin(axis=2)
    nn_gt = d.argmin(axis=1)                             # padded columns ignored below
    rows = np.arange(M)[:, None]
    term1 = np.take_along_axis(d, nn_pred[:, :, None], axis=2)[:, :, 0].mean(axis=1)
    d_gt = np.take_along_axis(d, nn_gt[:, None, :], axis=1)[:, 0, :]
    term2 = np.where(valid, d_gt, 0.0).sum(axis=1) / sizes
    grad = (2.0 / L) * (pred - tgt[rows, nn_pred])
    contrib = (2.0 / sizes)[:, None, None] * (pred[rows, nn_gt] - tgt)
    np.add.at(grad.reshape(M * L, 3), (rows * L + nn_gt)[valid], contrib[valid])
    return term1 + term2, grad, nn_pred, np.where(valid, nn_gt, -1)


def chamfer_batch(pred: np.ndarray, targets: list):
    """Per-row Chamfer values and gradients for ``(M, L, 3)`` predictions.

    Same conventions as :func:`chamfer_with_grad`. Rows are grouped by
    target size (next power of two) and padded within each group; padded
    slots are excluded from both minima.
    """
    pred = np.asarray(pred, dtype=np.float64)
    M, L, _ = pred.shape
    sizes = np.array([len(t) for t in targets], dtype=np.int64)
    if np.any(sizes == 0):
        raise ValueError("chamfer needs non-empty target sets")
    vals = np.empty(M)
    grad = np.empty_like(pred)
    choices = [None] * M
    bucket = np.ceil(np.log2(sizes)).astype(np.int64)
    for b in np.unique(bucket):
        rows = np.flatnonzero(bucket == b)
        v, g, nn_pred, nn_gt = _chamfer_padded(pred[rows], [targets[r] for r in rows])
        vals[rows] = v
        grad[rows] = g
        for k, r in enumerate(rows):
            choices[r] = np.concatenate([nn_pred[k], nn_gt[k, :sizes[r]]])
    return vals, grad, np.concatenate(choices)


def chamfer_mean(pred: Tensor, targets: list) -> Tensor:
    """Mean Chamfer over rows of ``pred`` (``(M, L, 3)``), one target set per row."""
    m = pred.data.shape[0]
    if m != len(targets):
        raise ValueError("prediction and target counts differ")
    vals, grads, choice = chamfer_batch(pred.data, targets)
    pred.tape.log_branch(choice)
    value = np.asarray(math.fsum(vals) / m, dtype=pred.data.dtype)
    gpred = (grads / m).astype(pred.data.dtype)
    return pred.tape.record(value, (pred,), lambda g: (g * gpred,))


# ---------------------------------------------------------------- Smooth-L1

def smooth_l1(x, beta: float = 1.0):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)
    return out if out.ndim else float(out)


def smooth_l1_grad(x, beta: float = 1.0):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


def smooth_l1_mean(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    r = pred.data.astype(np.float64) - np.asarray(target, dtype=np.float64).reshape(pred.data.shape)
    n = r.size
    pred.tape.log_branch(np.abs(r) < beta)
    value = np.asarray(math.fsum(np.ravel(smooth_l1(r, beta))) / n, dtype=pred.data.dtype)
    gr = (smooth_l1_grad(r, beta) / n).astype(pred.data.dtype)
    return pred.tape.record(value, (pred,), lambda g: (g * gr,))


# ---------------------------------------------------------------- combined

def _check_keys(preds, targets) -> None:
    if list(preds.grids) != list(targets.grids):
        raise ValueError("prediction and target grid sets differ")


def reconstruction_loss(preds, targets: GridTargets) -> Tensor:
    _check_keys(preds, targets)
    return chamfer_mean(preds.coords, targets.offsets)


def density_loss(preds, targets: GridTargets, beta: float = 1.0, density_scale: float = 1e-3) -> Tensor:
    """Smooth-L1 on densities expressed in ``density_scale`` units.

    The default ``1e-3`` compares kilo-points per cubic meter; pass ``1.0``
    for raw points per cubic meter.
    """
    _check_keys(preds, targets)
    return smooth_l1_mean(preds.density, targets.density * density_scale, beta)


def total_loss(preds, targets: GridTargets, lambda_d: float = 1.0, beta: float = 1.0,
               density_scale: float = 1e-3):
    """Returns ``(total, chamfer_part, density_part)`` as tensors."""
    if lambda_d < 0:
        raise ValueError("lambda_d must be non-negative")
    lc = reconstruction_loss(preds, targets)
    ld = density_loss(preds, targets, beta, density_scale)
    return add(lc, scale(ld, lambda_d)), lc, ld
