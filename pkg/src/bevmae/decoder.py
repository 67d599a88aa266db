"""Lightweight BEV decoder and the two per-grid prediction heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DECODER_KINDS = ("conv3x3", "residual")


@dataclass
class DecoderConfig:
    c_in: int = 64
    c_dec: int = 64
    num_points: int = 20
    kind: str = "conv3x3"
    relu: bool = True

    def __post_init__(self):
        if self.kind not in DECODER_KINDS:
            raise ValueError(f"decoder kind must be one of {DECODER_KINDS}, got {self.kind!r}")
        if self.num_points <= 0:
            raise ValueError("num_points must be positive")
        if self.kind == "residual" and self.c_in != self.c_dec:
            raise ValueError("residual decoder needs c_in == c_dec")

    def to_dict(self) -> dict:
        return {"c_in": self.c_in, "c_dec": self.c_dec, "num_points": self.num_points,
                "kind": self.kind, "relu": self.relu}

    @classmethod
    def from_dict(cls, d) -> "DecoderConfig":
        return cls(int(d["c_in"]), int(d["c_dec"]), int(d["num_points"]), d.get("kind", "conv3x3"),
                   bool(d.get("relu", True)))


@dataclass
class GridPredictions:
    grids: list           # masked grids, sorted
    coords: Tensor        # (M, L, 3) normalized offsets
    density: Tensor       # (M,) density in loss units

    def __len__(self) -> int:
        return len(self.grids)


def _uniform(rng, fan_in, shape):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def init_decoder_params(cfg: DecoderConfig, rng: np.random.Generator) -> dict:
    p = {
        "decoder.conv.weight": _uniform(rng, 9 * cfg.c_in, (3, 3, cfg.c_in, cfg.c_dec)),
        "decoder.conv.bias": np.zeros(cfg.c_dec),
    }
    if cfg.kind == "residual":
        p["decoder.conv2.weight"] = _uniform(rng, 9 * cfg.c_dec, (3, 3, cfg.c_dec, cfg.c_dec))
        p["decoder.conv2.bias"] = np.zeros(cfg.c_dec)
    p["head.coord.weight"] = _uniform(rng, cfg.c_dec, (cfg.c_dec, 3 * cfg.num_points))
    p["head.coord.bias"] = np.zeros(3 * cfg.num_points)
    p["head.density.weight"] = _uniform(rng, cfg.c_dec, (cfg.c_dec, 1))
    p["head.density.bias"] = np.zeros(1)
    return p


def decode(bev: Tensor, params: dict, cfg: DecoderConfig = None) -> Tensor:
    """3x3 conv (padding 1), optionally a residual second conv, then ReLU."""
    cfg = cfg or DecoderConfig(c_in=bev.data.shape[2], c_dec=params["decoder.conv.bias"].data.shape[0])
    if bev.data.shape[2] != cfg.c_in:
        raise ValueError(f"decoder expects {cfg.c_in} channels, got {bev.data.shape[2]}")
    h = ad.conv2d_same(bev, params["decoder.conv.weight"], params["decoder.conv.bias"])
    if cfg.kind == "residual":
        h = ad.conv2d_same(ad.relu(h), params["decoder.conv2.weight"], params["decoder.conv2.bias"])
        h = ad.add(h, bev)
    if cfg.relu:
        h = ad.relu(h)
    return h


def predict_at(hidden: Tensor, grids, params: dict, num_points: int = None) -> GridPredictions:
    """Apply both heads at each masked grid (``grids`` may be a MaskPlan)."""
    if hasattr(grids, "masked_sorted"):
        grids = grids.masked_sorted()
    grids = sorted(grids)
    X, Y, _ = hidden.data.shape
    ij = np.array(grids, dtype=np.int64).reshape(-1, 2)
    if len(ij) and (ij.min() < 0 or np.any(ij[:, 0] >= X) or np.any(ij[:, 1] >= Y)):
        raise ValueError("masked grid outside the BEV map")
    L = num_points or params["head.coord.bias"].data.shape[0] // 3
    feats = ad.gather_cells(hidden, ij)
    coords = ad.reshape(ad.linear(feats, params["head.coord.weight"], params["head.coord.bias"]), (len(grids), L, 3))
    density = ad.reshape(ad.linear(feats, params["head.density.weight"], params["head.density.bias"]), (len(grids),))
    return GridPredictions(grids, coords, density)
