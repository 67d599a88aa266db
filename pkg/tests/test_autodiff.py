import numpy as np
import pytest

from bevmae import autodiff as ad
from bevmae.autodiff import Rulebook, Tape, grad_check, relative_error
from bevmae.losses import chamfer_mean, smooth_l1_mean
from bevmae.sparse import LayerSpec, build_layer_plan


def project(t, seed=99):
    """Scalar <t, R> for a fixed random R, so every output entry matters."""
    r = np.random.default_rng(seed).normal(size=(t.data.size, 1))
    return ad.total(ad.linear(ad.reshape(t, (1, t.data.size)), t.tape.constant(r)))


def checker(build):
    """Wrap ``build(tape, p) -> scalar tensor`` in the grad_check protocol."""
    def f(params, need_grad):
        tape = Tape()
        p = {k: tape.param(k, v) for k, v in params.items()}
        out = build(tape, p)
        grads = tape.backward(out) if need_grad else None
        return float(out.data), grads, ad.branch_signature(tape)
    return f


def assert_grads(build, params, tol=1e-5):
    report = grad_check(checker(build), params, h=1e-5)
    assert set(report.per_parameter()) == set(params)
    assert report.max_rel_error < tol, report.worst(3)


rng = np.random.default_rng(0)


def test_linear_add_scale():
    params = {"x": rng.normal(size=(4, 5)), "w": rng.normal(size=(5, 3)), "b": rng.normal(size=3)}
    assert_grads(lambda t, p: project(ad.scale(ad.add(ad.linear(p["x"], p["w"], p["b"]), 0.5), -1.7)), params)


def test_add_broadcast():
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,))}
    assert_grads(lambda t, p: project(ad.add(p["a"], p["b"])), params)


def test_relu_off_kink():
    x = rng.normal(size=(6, 4))
    x[np.abs(x) < 0.05] = 0.3
    assert_grads(lambda t, p: project(ad.relu(p["x"])), {"x": x})


def test_relu_at_zero_has_zero_gradient():
    tape = Tape()
    x = tape.param("x", np.array([0.0, 1.0, -1.0]))
    g = tape.backward(ad.total(ad.relu(x)))["x"]
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def test_mean_and_reshape():
    params = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(3, 2))}
    assert_grads(lambda t, p: ad.mean([project(p["a"]), project(ad.reshape(p["b"], (2, 3)), seed=5)]), params)


def test_gather_cells_with_repeats():
    ij = np.array([[0, 1], [2, 2], [0, 1], [1, 0]])
    assert_grads(lambda t, p: project(ad.gather_cells(p["x"], ij)), {"x": rng.normal(size=(3, 3, 4))})


def test_fill_rows():
    rows = np.array([True, False, True, True, False])
    params = {"base": rng.normal(size=(5, 4)), "tok": rng.normal(size=4)}
    assert_grads(lambda t, p: project(ad.fill_rows(p["base"], rows, p["tok"])), params)


def test_conv2d_same():
    params = {"x": rng.normal(size=(5, 4, 3)), "w": rng.normal(size=(3, 3, 3, 2)), "b": rng.normal(size=2)}
    assert_grads(lambda t, p: project(ad.conv2d_same(p["x"], p["w"], p["b"])), params)


@pytest.mark.parametrize("layer", [LayerSpec("subm", 2, 3), LayerSpec("regular", 2, 3, (2, 2, 2), (1, 1, 1)),
                                   LayerSpec("regular", 2, 3, (2, 2, 3), (1, 1, 0))])
def test_sparse_conv(layer):
    grid = (6, 6, 6)
    sites = np.unique(rng.integers(0, 6, size=(25, 3)), axis=0)
    plan = build_layer_plan(sites, grid, layer)
    params = {"x": rng.normal(size=(len(sites), 2)), "w": rng.normal(size=(27, 2, 3)), "b": rng.normal(size=3)}
    assert_grads(lambda t, p: project(ad.sparse_conv(p["x"], p["w"], p["b"], plan.rules)), params)


def test_scatter_dense():
    cells = np.array([[0, 0], [1, 2], [1, 2], [3, 1]])
    slots = np.array([0, 0, 1, 1])
    assert_grads(lambda t, p: project(ad.scatter_dense(p["x"], cells, slots, (4, 3, 2))),
                 {"x": rng.normal(size=(4, 3))})


def test_chamfer_and_smooth_l1_ops():
    targets = [rng.uniform(-0.5, 0.5, size=(n, 3)) for n in (3, 7)]
    params = {"c": rng.normal(scale=0.4, size=(2, 4, 3)), "d": np.array([0.3, 2.2])}
    dens = np.array([0.9, 0.1])
    assert_grads(lambda t, p: ad.add(chamfer_mean(p["c"], targets), smooth_l1_mean(p["d"], dens, 1.0)), params)


def test_sum_of_params_gives_ones():
    tape = Tape()
    w = tape.param("w", rng.normal(size=(3, 2)))
    v = tape.param("v", rng.normal(size=5))
    g = tape.backward(ad.add(ad.total(w), ad.total(v)))
    np.testing.assert_array_equal(g["w"], np.ones((3, 2)))
    np.testing.assert_array_equal(g["v"], np.ones(5))


def test_half_squared_norm_gives_w():
    w0 = rng.normal(size=(4, 3))
    tape = Tape()
    w = tape.param("w", w0)
    flat = ad.reshape(w, (1, 12))
    sq = ad.linear(flat, ad.reshape(w, (12, 1)))   # w . w
    g = tape.backward(ad.scale(ad.total(sq), 0.5))["w"]
    np.testing.assert_allclose(g, w0, atol=1e-15)


def test_unused_param_gets_zero_gradient():
    tape = Tape()
    a = tape.param("a", np.ones(3))
    tape.param("unused", np.ones(2))
    g = tape.backward(ad.total(a))
    np.testing.assert_array_equal(g["unused"], np.zeros(2))


def test_non_scalar_loss_raises():
    tape = Tape()
    a = tape.param("a", np.ones(3))
    with pytest.raises(ValueError):
        tape.backward(ad.relu(a))


def test_replay_is_bit_identical():
    params = {"x": rng.normal(size=(5, 4, 3)), "w": rng.normal(size=(3, 3, 3, 2))}
    f = checker(lambda t, p: project(ad.relu(ad.conv2d_same(p["x"], p["w"]))))
    v1, g1, s1 = f(params, True)
    v2, g2, s2 = f(params, True)
    assert v1 == v2 and s1 == s2
    for k in g1:
        assert g1[k].tobytes() == g2[k].tobytes()


def test_zero_function_check():
    def f(params, need_grad):
        return 0.0, {k: np.zeros_like(v) for k, v in params.items()}, 0
    report = grad_check(f, {"a": rng.normal(size=4)})
    assert all(e.analytic == 0 and e.numeric == 0 for e in report.entries)
    assert report.max_rel_error == 0.0


def test_quadratic_error_scales_as_h_squared():
    # f = 1/2 x'Ax + c x_0^3 has third derivative, so central differences err by O(h^2).
    a = rng.normal(size=(3, 3))
    a = a @ a.T + np.eye(3)
    x0 = rng.normal(size=3)
    c = 0.7

    def f(params, need_grad):
        x = params["x"]
        val = 0.5 * x @ a @ x + c * x[0] ** 3
        g = a @ x
        g[0] += 3 * c * x[0] ** 2
        return float(val), {"x": g}, 0

    errs = []
    for h in (1e-2, 5e-3, 2.5e-3):
        rep = grad_check(f, {"x": x0.copy()}, h=h)
        errs.append(next(abs(e.analytic - e.numeric) for e in rep.entries if e.index == (0,)))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.01)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.01)


def test_kinked_components_are_resampled():
    # |x| has a kink at 0; a component within h of it must not be reported.
    x = np.array([1e-6, 0.5, -0.7, 0.9])

    def f(params, need_grad):
        v = params["x"]
        return float(np.abs(v).sum()), {"x": np.sign(v)}, hash(tuple(v > 0))

    rep = grad_check(f, {"x": x}, h=1e-4)
    assert rep.skipped_kinks == 1
    assert {e.index for e in rep.entries} == {(1,), (2,), (3,)}
    assert rep.max_rel_error < 1e-9


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-9, 0.0) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)
