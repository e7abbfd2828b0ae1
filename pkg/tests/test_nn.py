"""Activations and norms: value anchors, shape properties, FD gradients."""

import numpy as np
import numpy.testing as npt

from zipkit import nn, tensor as tz
from zipkit.gradcheck import check_value_grad


def _ev(fn, x):
    return fn(tz.Tensor(np.atleast_1d(np.float64(x)))).data

def _ev1(fn, x):
    return float(_ev(fn, x)[0])


def test_swish_anchors():
    npt.assert_allclose(_ev(nn.swish, 0.0), [0.0], atol=1e-15)
    npt.assert_allclose(_ev(nn.swish, 1.0), [0.7310585786300049], atol=1e-12)
    npt.assert_allclose(_ev(nn.swish, 1.0), [0.731059], atol=1e-6)
    # direct evaluation: swish(20) = 20 - 4.122e-8, swish(25) = 25 - 3.5e-10
    assert abs(_ev1(nn.swish, 20.0) - 20.0) < 1e-7
    assert abs(_ev1(nn.swish, 25.0) - 25.0) < 1e-8


def test_swooshr_anchors():
    assert abs(_ev1(nn.swooshr, 0.0)) < 1e-8  # offset puts it through 0
    npt.assert_allclose(_ev(nn.swooshr, 1.0), [0.2998854935599453], atol=1e-12)
    npt.assert_allclose(_ev(nn.swooshr, 1.0), [0.299885], atol=1e-6)


def test_swooshr_negative_slope():
    h = 1e-5
    slope = float((_ev(nn.swooshr, -20 + h) - _ev(nn.swooshr, -20 - h))[0]) / (2 * h)
    assert abs(slope - (-0.08)) < 1e-6


def test_swooshl_anchors():
    npt.assert_allclose(_ev(nn.swooshl, 0.0), [-0.016850072082190266], atol=1e-12)
    npt.assert_allclose(_ev(nn.swooshl, 0.0), [-0.016850], atol=1e-6)
    npt.assert_allclose(_ev(nn.swooshl, 4.0), [0.3381471805599453], atol=1e-12)
    npt.assert_allclose(_ev(nn.swooshl, 4.0), [0.338147], atol=1e-6)


def test_swooshl_is_shifted_swooshr():
    # swooshl(x) = swooshr(x-3) + (0.313261687 - 0.035 - 0.08*3), exactly
    xs = np.linspace(-25.0, 25.0, 301)
    shift = nn.SWOOSHR_OFFSET - nn.SWOOSHL_OFFSET - 0.08 * 3
    lhs = nn.swooshl_value(xs)
    rhs = nn.swooshr_value(xs - 3.0) + shift
    npt.assert_allclose(lhs, rhs, atol=1e-12)


def test_activations_overflow_safe():
    big = np.array([-800.0, 800.0])
    for fn in (nn.swooshr_value, nn.swooshl_value, nn.swish_value):
        assert np.isfinite(fn(big)).all()
    for fn in (nn.swooshr_deriv, nn.swooshl_deriv, nn.swish_deriv):
        assert np.isfinite(fn(big)).all()


def test_activations_bounded_below_scan():
    xs = np.linspace(-20.0, 20.0, 4001)
    assert nn.swooshr_value(xs).min() >= -0.35
    assert np.isfinite(nn.swooshl_value(xs)).all()
    assert nn.swooshl_value(xs).min() >= -0.35
    assert nn.swish_value(xs).min() >= -0.3


def test_layernorm_anchor_and_constant_slice():
    p = nn.LayerNormParams.create(2)
    out = nn.layernorm(tz.Tensor([[1.0, -1.0]]), p)
    npt.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)  # eps-perturbed

    p3 = nn.LayerNormParams.create(3)
    p3.beta.data = np.array([0.5, -0.5, 2.0])
    out = nn.layernorm(tz.Tensor([[4.0, 4.0, 4.0]]), p3)
    npt.assert_allclose(out.data, [[0.5, -0.5, 2.0]], atol=1e-12)


def test_layernorm_normalizes_mean_and_rms():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 16)) * 3.0 + 1.0
    out = nn.layernorm(tz.Tensor(x), nn.LayerNormParams.create(16)).data
    npt.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    npt.assert_allclose(np.sqrt((out ** 2).mean(axis=-1)), 1.0, atol=1e-4)


def test_biasnorm_anchor():
    p = nn.BiasNormParams.create(2)
    out = nn.biasnorm(tz.Tensor([[3.0, 4.0]]), p)
    npt.assert_allclose(out.data, [[0.848528, 1.131371]], atol=1e-6)
    npt.assert_allclose(out.data, np.array([[3.0, 4.0]]) / np.sqrt(12.5), atol=1e-8)


def test_biasnorm_unit_rms_default_params():
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.standard_normal((3, 8)) * 10.0
        out = nn.biasnorm(tz.Tensor(x), nn.BiasNormParams.create(8)).data
        npt.assert_allclose(np.sqrt((out ** 2).mean(axis=-1)), 1.0, atol=1e-6)


def test_biasnorm_degenerate_input_is_finite_zero():
    p = nn.BiasNormParams.create(4)  # bias initialized to 0
    out = nn.biasnorm(tz.Tensor(np.zeros((2, 4))), p)
    assert np.isfinite(out.data).all()
    npt.assert_allclose(out.data, 0.0)


def test_biasnorm_scale_always_positive():
    for gamma in [-50.0, -3.0, 0.0, 2.0, 40.0]:
        assert np.exp(gamma) > 0.0
        p = nn.BiasNormParams.create(3)
        p.log_scale.data = np.asarray(gamma)
        x = np.array([[1.0, 2.0, -1.0]])
        out = nn.biasnorm(tz.Tensor(x), p).data
        # multiplier applied to x/RMS keeps the input's sign pattern
        assert (np.sign(out) == np.sign(x)).all()


def test_biasnorm_retains_length_information():
    # with b != 0, x and 2x produce outputs whose rms ratio is not 1,
    # unlike layernorm whose output is scale-invariant up to eps
    x = np.array([[0.8, -1.2, 2.0, 0.1]])
    p = nn.BiasNormParams.create(4)
    p.bias.data = np.array([1.0, -0.5, 0.3, 0.7])

    def rms(a):
        return float(np.sqrt((a ** 2).mean()))

    r1 = rms(nn.biasnorm(tz.Tensor(x), p).data)
    r2 = rms(nn.biasnorm(tz.Tensor(2 * x), p).data)
    assert abs(r2 / r1 - 1.0) > 1e-3

    lp = nn.LayerNormParams.create(4)
    l1 = rms(nn.layernorm(tz.Tensor(x), lp).data)
    l2 = rms(nn.layernorm(tz.Tensor(2 * x), lp).data)
    assert abs(l2 / l1 - 1.0) < 1e-4


def test_all_five_ops_gradients_vs_fd():
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((3, 6))
    w = rng.standard_normal((3, 6))
    lp = nn.LayerNormParams.create(6)
    lp.gamma.data = rng.standard_normal(6)
    lp.beta.data = rng.standard_normal(6)
    bp = nn.BiasNormParams.create(6)
    bp.bias.data = rng.standard_normal(6) * 0.5
    bp.log_scale.data = np.asarray(0.4)

    cases = {
        "swish": lambda x: tz.tsum(tz.mul(nn.swish(x), tz.Tensor(w))),
        "swooshr": lambda x: tz.tsum(tz.mul(nn.swooshr(x), tz.Tensor(w))),
        "swooshl": lambda x: tz.tsum(tz.mul(nn.swooshl(x), tz.Tensor(w))),
        "layernorm": lambda x: tz.tsum(tz.mul(nn.layernorm(x, lp), tz.Tensor(w))),
        "biasnorm": lambda x: tz.tsum(tz.mul(nn.biasnorm(x, bp), tz.Tensor(w))),
    }
    for name, loss in cases.items():
        err = check_value_grad(loss, x0, 1e-5)
        assert err < 1e-5, f"{name}: {err}"


def test_norm_param_gradients_vs_fd():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((4, 5))
    w = rng.standard_normal((4, 5))

    lp = nn.LayerNormParams.create(5)

    def ln_loss_gamma(gv):
        lp2 = nn.LayerNormParams(gamma=gv, beta=lp.beta)
        return tz.tsum(tz.mul(nn.layernorm(tz.Tensor(x0), lp2), tz.Tensor(w)))

    err = check_value_grad(ln_loss_gamma, np.ones(5), 1e-5)
    assert err < 1e-5

    bp = nn.BiasNormParams.create(5)

    def bn_loss_bias(bv):
        bp2 = nn.BiasNormParams(bias=bv, log_scale=bp.log_scale)
        return tz.tsum(tz.mul(nn.biasnorm(tz.Tensor(x0), bp2), tz.Tensor(w)))

    err = check_value_grad(bn_loss_bias, 0.3 * rng.standard_normal(5), 1e-5)
    assert err < 1e-5

    def bn_loss_gamma(gv):
        bp2 = nn.BiasNormParams(bias=bp.bias, log_scale=gv)
        return tz.tsum(tz.mul(nn.biasnorm(tz.Tensor(x0), bp2), tz.Tensor(w)))

    err = check_value_grad(bn_loss_gamma, np.asarray(0.2), 1e-5)
    assert err < 1e-5
