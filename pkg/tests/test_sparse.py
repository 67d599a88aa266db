import itertools

import numpy as np
import pytest

from bevmae.geometry import SparseTensor
from bevmae.sparse import LayerSpec, bev_flatten, build_layer_plan, sparse_conv3d

from oracles import dense_conv3d, random_sparse


def test_identity_kernel_submanifold():
    rng = np.random.default_rng(0)
    sites, feats, spatial = random_sparse(rng, 8, cin=4)
    w = np.zeros((27, 4, 4))
    w[13] = np.eye(4)
    out = sparse_conv3d(SparseTensor(sites, feats, spatial + (4,)), w, np.zeros(4), LayerSpec("subm", 4, 4))
    np.testing.assert_array_equal(out.sites, sites)
    np.testing.assert_array_equal(out.features, feats)


@pytest.mark.parametrize("site", [(0, 0, 0), (2, 3, 1), (5, 5, 5), (0, 4, 5)])
def test_single_site_dilates_by_footprint(site):
    spatial = (6, 6, 6)
    layer = LayerSpec("regular", 1, 1, (1, 1, 1), (1, 1, 1))
    plan = build_layer_plan(np.array([site]), spatial, layer)
    expected = sorted(tuple(int(v) for v in np.add(site, d)) for d in itertools.product((-1, 0, 1), repeat=3)
                      if all(0 <= s + e < 6 for s, e in zip(site, d)))
    assert [tuple(s) for s in plan.out_sites] == expected


def test_submanifold_keeps_sites():
    rng = np.random.default_rng(1)
    sites, _, spatial = random_sparse(rng, 10)
    plan = build_layer_plan(sites, spatial, LayerSpec("subm", 3, 3))
    np.testing.assert_array_equal(plan.out_sites, sites)


LAYERS = [
    LayerSpec("subm", 3, 5),
    LayerSpec("regular", 3, 5, (1, 1, 1), (1, 1, 1)),
    LayerSpec("regular", 3, 5, (2, 2, 2), (1, 1, 1)),
    LayerSpec("regular", 3, 5, (2, 2, 2), (0, 0, 0)),
    LayerSpec("regular", 3, 5, (2, 2, 3), (1, 1, 0)),
]


@pytest.mark.parametrize("layer", LAYERS, ids=lambda l: f"{l.kind}-s{l.stride}-p{l.padding}")
def test_matches_dense_oracle(layer):
    rng = np.random.default_rng(2)
    for _ in range(15):
        sites, feats, spatial = random_sparse(rng, 10, cin=3)
        w, b = rng.normal(size=(27, 3, 5)), rng.normal(size=5)
        out = sparse_conv3d(SparseTensor(sites, feats, spatial + (3,)), w, b, layer)
        ref_sites, ref_feats, ref_shape = dense_conv3d(sites, feats, spatial, w, b, layer.stride,
                                                       layer.padding, layer.kind == "subm")
        assert out.shape[:3] == ref_shape
        np.testing.assert_array_equal(out.sites, ref_sites)
        assert np.max(np.abs(out.features - ref_feats), initial=0.0) <= 1e-10


def test_channel_mismatch_raises():
    x = SparseTensor(np.zeros((1, 3), np.int64), np.ones((1, 2)), (3, 3, 3, 2))
    with pytest.raises(ValueError):
        sparse_conv3d(x, np.zeros((27, 3, 4)), None, LayerSpec("subm", 3, 4))
    with pytest.raises(ValueError):
        sparse_conv3d(x, np.zeros((27, 2, 5)), None, LayerSpec("subm", 2, 4))


def test_submanifold_requires_unit_stride():
    with pytest.raises(ValueError):
        LayerSpec("subm", 1, 1, (2, 2, 2))


def test_bev_flatten_examples():
    empty = SparseTensor(np.zeros((0, 3), np.int64), np.zeros((0, 2)), (4, 4, 1, 2))
    assert not bev_flatten(empty).any()
    one = SparseTensor(np.array([[1, 2, 0]]), np.array([[3.0, -1.0]]), (4, 4, 1, 2))
    out = bev_flatten(one)
    assert out.shape == (4, 4, 2)
    assert np.count_nonzero(np.abs(out).sum(axis=2)) == 1
    np.testing.assert_array_equal(out[1, 2], [3.0, -1.0])


def test_bev_flatten_stacks_z_in_channels():
    x = SparseTensor(np.array([[0, 0, 0], [0, 0, 2]]), np.array([[1.0], [2.0]]), (1, 1, 3, 1))
    np.testing.assert_array_equal(bev_flatten(x)[0, 0], [1.0, 0.0, 2.0])
