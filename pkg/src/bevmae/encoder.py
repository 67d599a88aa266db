"""Sparse voxel encoder with learnable point-token substitution."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .geometry import GridSpec, PointCloud, SparseTensor, site_keys, voxelize_mean
from .masking import MaskError, MaskPlan
from .sparse import LayerPlan, LayerSpec, bev_flatten, build_layer_plan, relu_sparse, sparse_conv3d

INPUT_CHANNELS = 4


@dataclass
class EncoderConfig:
    layers: list = field(default_factory=list)
    nonlinear: bool = True
    collapse_z: bool = True

    @classmethod
    def default(cls, c0: int = INPUT_CHANNELS) -> "EncoderConfig":
        return cls([
            LayerSpec("subm", c0, 16),
            LayerSpec("regular", 16, 32, (2, 2, 2), (1, 1, 1)),
            LayerSpec("regular", 32, 64, (2, 2, 2), (1, 1, 1)),
            LayerSpec("regular", 64, 64, (2, 2, 3), (1, 1, 0)),
        ])

    @property
    def in_channels(self) -> int:
        return self.layers[0].cin

    @property
    def out_channels(self) -> int:
        return self.layers[-1].cout

    def output_shape(self, voxel_shape) -> tuple:
        shape = tuple(voxel_shape)
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def bev_channels(self, spec: GridSpec) -> int:
        return self.output_shape(spec.voxel_shape)[2] * self.out_channels

    def validate(self, spec: GridSpec) -> None:
        if not self.layers:
            raise ValueError("encoder needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.cout != b.cin:
                raise ValueError(f"channel mismatch between layers: {a.cout} -> {b.cin}")
        sx = int(np.prod([l.stride[0] for l in self.layers]))
        sy = int(np.prod([l.stride[1] for l in self.layers]))
        if sx != spec.downsample_d or sy != spec.downsample_d:
            raise ValueError(f"x/y strides multiply to {sx}/{sy}, grid uses d={spec.downsample_d}")
        out = self.output_shape(spec.voxel_shape)
        if out[:2] != spec.bev_shape:
            raise ValueError(f"encoder output plane {out[:2]} differs from BEV plane {spec.bev_shape}")
        if self.collapse_z and out[2] != 1:
            raise ValueError(f"encoder leaves {out[2]} z-bins but collapse_z is set")

    def to_dict(self) -> dict:
        return {"layers": [l.to_dict() for l in self.layers], "nonlinear": self.nonlinear,
                "collapse_z": self.collapse_z}

    @classmethod
    def from_dict(cls, d) -> "EncoderConfig":
        return cls([LayerSpec.from_dict(l) for l in d["layers"]], bool(d.get("nonlinear", True)),
                   bool(d.get("collapse_z", True)))


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, token_std: float = 0.02) -> dict:
    """Kaiming-uniform (fan-in) weights, zero biases, N(0, token_std) token."""
    params = {}
    for i, layer in enumerate(cfg.layers):
        fan_in = 27 * layer.cin
        bound = np.sqrt(6.0 / fan_in)
        params[f"encoder.conv{i}.weight"] = rng.uniform(-bound, bound, (27, layer.cin, layer.cout))
        params[f"encoder.conv{i}.bias"] = np.zeros(layer.cout)
    params["token"] = rng.normal(0.0, token_std, cfg.in_channels)
    return params


def build_encoder_plans(sites: np.ndarray, spatial, cfg: EncoderConfig) -> list[LayerPlan]:
    """Rulebooks for the whole stack; depends only on the input site set."""
    plans = []
    for layer in cfg.layers:
        plan = build_layer_plan(sites, spatial, layer)
        plans.append(plan)
        sites, spatial = plan.out_sites, plan.out_shape
    return plans


def site_grid_keys(sites: np.ndarray, spec: GridSpec) -> np.ndarray:
    d = spec.downsample_d
    _, by = spec.bev_shape
    return (sites[:, 0] // d) * by + sites[:, 1] // d


def _grid_keys(grids, spec: GridSpec) -> np.ndarray:
    _, by = spec.bev_shape
    return np.array(sorted(g[0] * by + g[1] for g in grids), dtype=np.int64)


def masked_site_rows(full: SparseTensor, plan: MaskPlan, spec: GridSpec) -> np.ndarray:
    """Boolean row mask: True where the site's BEV grid is masked."""
    keys = site_grid_keys(full.sites, spec)
    masked = np.isin(keys, _grid_keys(plan.masked, spec))
    visible = np.isin(keys, _grid_keys(plan.visible, spec))
    if np.any(~(masked | visible)):
        raise MaskError("site lies in a grid that is neither masked nor visible")
    return masked


def substitute_token(full: SparseTensor, visible: SparseTensor, plan: MaskPlan, token, spec: GridSpec) -> SparseTensor:
    """Full-cloud sites; masked-grid rows carry the token, visible rows their own features.

    Masked rows never read from ``full.features``, so masked geometry cannot
    leak beyond the site pattern itself.
    """
    masked = masked_site_rows(full, plan, spec)
    spatial = full.shape[:3]
    full_keys = site_keys(full.sites, spatial)
    vis_keys = site_keys(visible.sites, spatial)
    vis_rows = np.flatnonzero(~masked)
    pos = np.searchsorted(vis_keys, full_keys[vis_rows])
    if len(vis_rows) and (np.any(pos >= len(vis_keys)) or np.any(vis_keys[np.minimum(pos, len(vis_keys) - 1)] != full_keys[vis_rows])):
        raise MaskError("visible-grid site missing from the visible voxelization")
    vis_feats = np.asarray(visible.feature_array())
    tdata = token.data if isinstance(token, Tensor) else np.asarray(token)
    base = np.zeros((len(full), full.channels), dtype=np.result_type(vis_feats, tdata))
    base[vis_rows] = vis_feats[pos]
    if isinstance(token, Tensor):
        feats = ad.fill_rows(base, masked, token)
    else:
        feats = base
        feats[masked] = tdata
    return SparseTensor(full.sites, feats, full.shape)


def run_encoder(x: SparseTensor, params: dict, cfg: EncoderConfig, plans: list = None) -> list[SparseTensor]:
    """Every layer's output, in order. ``params`` holds arrays or tensors."""
    outs = []
    for i, layer in enumerate(cfg.layers):
        plan = plans[i] if plans is not None else None
        x = sparse_conv3d(x, params[f"encoder.conv{i}.weight"], params[f"encoder.conv{i}.bias"], layer, plan)
        if cfg.nonlinear:
            x = relu_sparse(x)
        outs.append(x)
    return outs


def encoder_input(cloud: PointCloud, visible: PointCloud, plan: MaskPlan, token, spec: GridSpec) -> SparseTensor:
    return substitute_token(voxelize_mean(cloud, spec), voxelize_mean(visible, spec), plan, token, spec)


def encode(cloud: PointCloud, spec: GridSpec, plan: MaskPlan, params: dict, cfg: EncoderConfig,
           visible: PointCloud = None, plans: list = None):
    """voxelize -> token substitution -> conv stack -> BEV map ``(X, Y, nz * C)``.

    ``visible`` defaults to the points of the plan's visible grids.
    """
    if visible is None:
        from .geometry import build_bev_occupancy
        from .masking import split_cloud
        visible = split_cloud(cloud, build_bev_occupancy(cloud, spec), plan).visible_points
    x = encoder_input(cloud, visible, plan, params["token"], spec)
    outs = run_encoder(x, params, cfg, plans)
    return bev_flatten(outs[-1])


def bind(tape: Tape, params: dict, prefix: str = "") -> dict:
    """Register arrays on ``tape`` as named parameter tensors."""
    return {name: tape.param(name, value) for name, value in params.items() if name.startswith(prefix)}
