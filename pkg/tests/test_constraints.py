"""Balancer and Whitener: penalty anchors, injection scaling, invariances."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from zipkit import constraints as cs, tensor as tz
from zipkit.gradcheck import check_value_grad, numeric_gradient, rel_error
from zipkit.tensor import Tensor


def test_pos_to_meanstd_anchors():
    assert cs.pos_to_meanstd(0.5) == 0.0
    npt.assert_allclose(cs.pos_to_meanstd(0.2), -cs.pos_to_meanstd(0.8), atol=1e-12)
    # direct evaluation: arctanh(0.5) / (sqrt(pi) * ln 2)
    npt.assert_allclose(cs.pos_to_meanstd(0.75), 0.44710966661033974, atol=1e-12)


def test_pos_to_meanstd_monotone_and_domain():
    ps = np.linspace(0.01, 0.99, 50)
    vals = [cs.pos_to_meanstd(p) for p in ps]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            cs.pos_to_meanstd(bad)


def test_abs_to_rms():
    assert cs.abs_to_rms(0.0) == 0.0
    npt.assert_allclose(cs.abs_to_rms(1.0), math.sqrt(math.pi / 2), atol=1e-12)
    npt.assert_allclose(cs.abs_to_rms(1.0), 1.253314, atol=1e-6)
    npt.assert_allclose(cs.abs_to_rms(2 * 0.7), 2 * cs.abs_to_rms(0.7), atol=1e-15)


def _inbounds_activations(rng, n=64, d=4):
    # zero-mean, unit-ish rms, half positive: comfortably inside defaults
    x = rng.standard_normal((n, d))
    return x / np.sqrt((x * x).mean(axis=0))


def test_balancer_penalty_zero_inside_bounds():
    rng = np.random.default_rng(0)
    cfg = cs.BalancerConfig()
    pen = cs.balancer_penalty(Tensor(_inbounds_activations(rng)), cfg)
    assert float(pen.data) == 0.0


def test_balancer_penalty_rms_anchor():
    # one channel with rms = e * r_max and mean 0: L_RMS contributes exactly 1
    cfg = cs.BalancerConfig(a_min=0.2, a_max=1.0)
    _, r_max = cfg.rms_bounds()
    c = math.e * r_max
    x = np.tile([[c], [-c]], (8, 1))
    pen = cs.balancer_penalty(Tensor(x), cfg)
    npt.assert_allclose(float(pen.data), 1.0, atol=1e-9)


def test_balancer_penalty_continuous_at_clamp_boundary():
    cfg = cs.BalancerConfig(a_min=0.5, a_max=2.0)
    r_min, _ = cfg.rms_bounds()
    scales = np.linspace(0.9, 1.1, 81) * r_min
    vals = []
    for s in scales:
        x = np.tile([[s], [-s]], (6, 1))
        vals.append(float(cs.balancer_penalty(Tensor(x), cfg).data))
    diffs = np.abs(np.diff(vals))
    assert diffs.max() < 0.02  # no jumps on a fine grid across the kink


def test_balancer_penalty_gradient_vs_fd():
    rng = np.random.default_rng(1)
    cfg = cs.BalancerConfig(a_min=0.5, a_max=0.8, p_min=0.3, p_max=0.6)
    x0 = rng.standard_normal((20, 3)) * 2.0 + 0.7
    err = check_value_grad(lambda x: cs.balancer_penalty(x, cfg), x0, 1e-5)
    assert err < 1e-5


def _backward_through_attach(x0, g_out, attach):
    xt = Tensor(x0, requires_grad=True)
    y = attach(xt)
    tz.backward(tz.tsum(tz.mul(y, Tensor(g_out))))
    return xt.grad


def test_attach_balancer_forward_transparent():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    out = cs.attach_balancer(x, cs.BalancerConfig())
    assert out.data.tobytes() == x.data.tobytes()


def test_attach_balancer_noop_when_inside_bounds():
    rng = np.random.default_rng(3)
    x0 = _inbounds_activations(rng)
    g = rng.standard_normal(x0.shape)
    got = _backward_through_attach(x0, g, lambda x: cs.attach_balancer(x, cs.BalancerConfig()))
    npt.assert_array_equal(got, g)


def test_attach_balancer_injection_scaling():
    rng = np.random.default_rng(4)
    cfg = cs.BalancerConfig(a_min=2.0, a_max=3.0, alpha=0.04)
    x0 = 0.1 * rng.standard_normal((16, 4))  # rms far below bounds
    g = rng.standard_normal(x0.shape)
    g[3] = 0.0  # a "padding frame"
    got = _backward_through_attach(x0, g, lambda x: cs.attach_balancer(x, cfg))
    injected = got - g
    # zero-gradient positions receive zero injection
    npt.assert_array_equal(injected[3], 0.0)
    # direct recomputation of the scaling rule
    with tz.fresh_tape():
        leaf = Tensor(x0, requires_grad=True)
        tz.backward(cs.balancer_penalty(leaf, cfg))
        gp = leaf.grad
    unit = gp / np.sqrt((gp * gp).mean())
    npt.assert_allclose(injected, cfg.alpha * unit * np.abs(g), atol=1e-12)
    rms_inj = np.sqrt((injected ** 2).mean())
    rms_expect = cfg.alpha * np.sqrt(((unit * np.abs(g)) ** 2).mean())
    npt.assert_allclose(rms_inj, rms_expect, atol=1e-12)
    # magnitude bound: rms of the injection cannot exceed alpha * max|g|
    assert rms_inj <= cfg.alpha * np.abs(g).max() + 1e-15


def _exactly_white(rng, n, d):
    x = rng.standard_normal((n, d))
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / n
    vals, vecs = np.linalg.eigh(cov)
    return xc @ vecs @ np.diag(vals ** -0.5) @ vecs.T


def test_whitener_metric_identity_covariance():
    rng = np.random.default_rng(5)
    y = _exactly_white(rng, 40, 6)
    npt.assert_allclose(float(cs.whitener_metric(Tensor(y)).data), 1.0, atol=1e-9)


def test_whitener_metric_rank_one():
    rng = np.random.default_rng(6)
    u = rng.standard_normal(32)
    v = rng.standard_normal(16)
    x = np.outer(u, v)
    npt.assert_allclose(float(cs.whitener_metric(Tensor(x)).data), 16.0, atol=1e-6)


def test_whitener_metric_at_least_one():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(3, 20))
        d = int(rng.integers(2, 8))
        x = rng.standard_normal((n, d)) * rng.uniform(0.1, 5)
        assert float(cs.whitener_metric(Tensor(x)).data) >= 1.0 - 1e-12


def test_whitener_metric_invariances():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((24, 5))
    base = float(cs.whitener_metric(Tensor(x)).data)
    shifted = float(cs.whitener_metric(Tensor(x + rng.standard_normal(5))).data)
    npt.assert_allclose(shifted, base, atol=1e-9)
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    rotated = float(cs.whitener_metric(Tensor(x @ q)).data)
    npt.assert_allclose(rotated, base, atol=1e-9)


def test_whitener_metric_degenerate_input():
    x = np.ones((4, 3)) * 2.5  # centered input is all zeros
    assert float(cs.whitener_metric(Tensor(x)).data) == 1.0


def test_whitener_metric_rejects_single_frame():
    with pytest.raises(tz.ShapeError):
        cs.whitener_metric(Tensor(np.ones((1, 4))))


def test_attach_whitener_inactive_below_threshold():
    rng = np.random.default_rng(9)
    y = _exactly_white(rng, 30, 6)  # metric 1 < 10
    g = rng.standard_normal(y.shape)
    got = _backward_through_attach(y, g, lambda x: cs.attach_whitener(x, cs.WhitenerConfig()))
    npt.assert_array_equal(got, g)


def test_attach_whitener_active_l2_ratio():
    rng = np.random.default_rng(10)
    u = rng.standard_normal(32)
    v = rng.standard_normal(16)
    x0 = np.outer(u, v)  # metric 16 > 10
    g = rng.standard_normal(x0.shape)
    got = _backward_through_attach(x0, g, lambda x: cs.attach_whitener(x, cs.WhitenerConfig()))
    injected = got - g
    ratio = np.linalg.norm(injected) / np.linalg.norm(g)
    npt.assert_allclose(ratio, 0.01, atol=1e-9)


def test_attach_whitener_direction_matches_fd():
    rng = np.random.default_rng(11)
    x0 = np.outer(rng.standard_normal(12), rng.standard_normal(16))
    x0 += 0.01 * rng.standard_normal(x0.shape)
    g = rng.standard_normal(x0.shape)
    got = _backward_through_attach(x0, g, lambda x: cs.attach_whitener(x, cs.WhitenerConfig()))
    injected = (got - g).ravel()

    def f(xv):
        with tz.no_grad():
            return float(cs.whitener_metric(Tensor(xv)).data)

    fd = numeric_gradient(f, x0).ravel()
    cosine = np.dot(injected, fd) / (np.linalg.norm(injected) * np.linalg.norm(fd))
    assert cosine > 0.999


def test_whitener_metric_gradient_vs_fd():
    rng = np.random.default_rng(12)
    x0 = rng.standard_normal((10, 4)) @ np.diag([2.0, 1.0, 0.5, 0.1])
    err = check_value_grad(cs.whitener_metric, x0, 1e-5)
    assert err < 1e-5


def test_config_validation():
    with pytest.raises(ValueError):
        cs.BalancerConfig(p_min=0.8, p_max=0.2)
    with pytest.raises(ValueError):
        cs.BalancerConfig(a_min=0.0)
    with pytest.raises(ValueError):
        cs.WhitenerConfig(w_min=0.5)
    with pytest.raises(ValueError):
        cs.WhitenerConfig(alpha=0.0)
