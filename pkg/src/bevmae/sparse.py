"""Sparse 3D convolution on voxel sites.

Convolution is correlation-style: output site ``o`` reads input
``o * stride - padding + tap`` for each of the 27 taps ``(a, b, c)`` in
``{0, 1, 2}^3``; tap index ``k = 9a + 3b + c``.

* submanifold: stride 1, padding 1, output sites equal input sites.
* regular: an output site is active iff at least one input site lies in
  its kernel footprint.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Rulebook, Tape, Tensor
from .geometry import SparseTensor, keys_to_sites, site_keys

TAPS = np.array([(a, b, c) for a in range(3) for b in range(3) for c in range(3)], dtype=np.int64)


@dataclass(frozen=True)
class LayerSpec:
    kind: str                      # "subm" or "regular"
    cin: int
    cout: int
    stride: tuple = (1, 1, 1)
    padding: tuple = (1, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        object.__setattr__(self, "padding", tuple(int(p) for p in self.padding))
        if self.kind not in ("subm", "regular"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "subm" and (self.stride != (1, 1, 1) or self.padding != (1, 1, 1)):
            raise ValueError("submanifold layers use stride 1 and padding 1")

    def out_shape(self, spatial) -> tuple:
        if self.kind == "subm":
            return tuple(spatial)
        return tuple((n + 2 * p - 3) // s + 1 for n, p, s in zip(spatial, self.padding, self.stride))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "cin": self.cin, "cout": self.cout,
                "stride": list(self.stride), "padding": list(self.padding)}

    @classmethod
    def from_dict(cls, d) -> "LayerSpec":
        return cls(d["kind"], int(d["cin"]), int(d["cout"]), tuple(d["stride"]), tuple(d["padding"]))


@dataclass
class LayerPlan:
    """Precomputed rulebook and output geometry for one layer."""

    rules: Rulebook
    out_sites: np.ndarray
    out_shape: tuple


def _lookup(sorted_keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row of each query key in ``sorted_keys`` or -1."""
    if len(sorted_keys) == 0:
        return np.full(len(query), -1, dtype=np.int64)
    pos = np.minimum(np.searchsorted(sorted_keys, query), len(sorted_keys) - 1)
    return np.where(sorted_keys[pos] == query, pos, -1)


def build_layer_plan(sites: np.ndarray, spatial, layer: LayerSpec) -> LayerPlan:
    sites = np.asarray(sites, dtype=np.int64).reshape(-1, 3)
    spatial = tuple(int(n) for n in spatial)
    out_shape = layer.out_shape(spatial)
    in_keys = site_keys(sites, spatial)
    in_rows, out_rows = [], []
    if layer.kind == "subm":
        for tap in TAPS:
            nb = sites + (tap - 1)
            ok = np.all((nb >= 0) & (nb < spatial), axis=1)
            found = np.full(len(sites), -1)
            if ok.any():
                found[ok] = _lookup(in_keys, site_keys(nb[ok], spatial))
            rows = np.flatnonzero(found >= 0)
            in_rows.append(found[rows])
            out_rows.append(rows)
        return LayerPlan(Rulebook(in_rows, out_rows, len(sites)), sites.copy(), out_shape)

    stride = np.array(layer.stride)
    pad = np.array(layer.padding)
    cand_in, cand_out = [], []
    for tap in TAPS:
        num = sites + pad - tap
        o = num // stride
        ok = np.all((num % stride == 0) & (o >= 0) & (o < out_shape), axis=1)
        rows = np.flatnonzero(ok)
        cand_in.append(rows)
        cand_out.append(site_keys(o[rows], out_shape))
    all_out = np.concatenate(cand_out) if cand_out else np.zeros(0, np.int64)
    out_keys = np.unique(all_out)
    for rows, keys in zip(cand_in, cand_out):
        in_rows.append(rows)
        out_rows.append(np.searchsorted(out_keys, keys))
    return LayerPlan(Rulebook(in_rows, out_rows, len(out_keys)), keys_to_sites(out_keys, out_shape), out_shape)


def _as_tensor_features(x: SparseTensor, tape: Tape):
    if isinstance(x.features, Tensor):
        return x.features, x.features.tape, False
    tape = tape or Tape(np.result_type(np.asarray(x.features), np.float64))
    return tape.constant(x.features), tape, True


def sparse_conv3d(x: SparseTensor, weight, bias, layer: LayerSpec, plan: LayerPlan = None) -> SparseTensor:
    """Apply one sparse conv layer. ``weight`` is ``(27, cin, cout)``.

    Accepts plain arrays (returns arrays) or tape tensors (returns a tensor).
    """
    if x.channels != layer.cin:
        raise ValueError(f"layer expects {layer.cin} input channels, got {x.channels}")
    wdata = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    if wdata.shape != (27, layer.cin, layer.cout):
        raise ValueError(f"weight shape {wdata.shape} does not match layer {layer}")
    if plan is None:
        plan = build_layer_plan(x.sites, x.shape[:3], layer)
    tape = weight.tape if isinstance(weight, Tensor) else None
    feats, tape, plain = _as_tensor_features(x, tape)
    w = weight if isinstance(weight, Tensor) else tape.constant(weight)
    b = None if bias is None else (bias if isinstance(bias, Tensor) else tape.constant(bias))
    out = ad.sparse_conv(feats, w, b, plan.rules)
    plain = plain and not isinstance(weight, Tensor)
    return SparseTensor(plan.out_sites, out.data if plain else out, plan.out_shape + (layer.cout,))


def relu_sparse(x: SparseTensor) -> SparseTensor:
    if isinstance(x.features, Tensor):
        return SparseTensor(x.sites, ad.relu(x.features), x.shape)
    return SparseTensor(x.sites, np.maximum(x.features, 0), x.shape)


def bev_flatten(x: SparseTensor):
    """Dense ``(X, Y, nz * C)`` map; z-bins are concatenated channel-wise."""
    X, Y, nz, c = x.shape
    if isinstance(x.features, Tensor):
        return ad.scatter_dense(x.features, x.sites[:, :2], x.sites[:, 2], (X, Y, nz))
    out = np.zeros((X, Y, nz, c), dtype=np.asarray(x.features).dtype)
    out[x.sites[:, 0], x.sites[:, 1], x.sites[:, 2]] = x.features
    return out.reshape(X, Y, nz * c)
