"""Activation functions and normalization layers.

The activations are recorded as single tape ops with closed-form
derivatives; their value/derivative helpers are module-level functions so
tests can corrupt one deliberately and watch the certification suite catch
it. Softplus is computed overflow-safely as max(z,0) + log1p(exp(-|z|)).

Normalizations are composed from tensor primitives, so their backward
rules come from the tape rather than hand derivation.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import Tensor

SWOOSHR_OFFSET = 0.313261687  # places the right zero crossing at the origin
SWOOSHL_OFFSET = 0.035        # tuned; near but not exactly origin-crossing
LAYERNORM_EPS = 1e-5
BIASNORM_EPS = 1e-8


def softplus_value(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid_value(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def swish_value(x):
    return x * sigmoid_value(x)


def swish_deriv(x):
    s = sigmoid_value(x)
    return s * (1.0 + x * (1.0 - s))


def swooshr_value(x):
    return softplus_value(x - 1.0) - 0.08 * x - SWOOSHR_OFFSET


def swooshr_deriv(x):
    return sigmoid_value(x - 1.0) - 0.08


def swooshl_value(x):
    return softplus_value(x - 4.0) - 0.08 * x - SWOOSHL_OFFSET


def swooshl_deriv(x):
    return sigmoid_value(x - 4.0) - 0.08


def _unary(x, value_fn, deriv_fn):
    x = tz._as_tensor(x)
    return tz._make(value_fn(x.data), [(x, lambda g: g * deriv_fn(x.data))])


def swish(x):
    """x * sigmoid(x)."""
    return _unary(x, swish_value, swish_deriv)


def swooshr(x):
    """softplus(x-1) - 0.08x - 0.313261687 (zero at the origin)."""
    return _unary(x, swooshr_value, swooshr_deriv)


def swooshl(x):
    """softplus(x-4) - 0.08x - 0.035 (right-shifted sibling of swooshr)."""
    return _unary(x, swooshl_value, swooshl_deriv)


@dataclass
class LayerNormParams:
    gamma: Tensor  # per-channel scale
    beta: Tensor   # per-channel bias

    @classmethod
    def create(cls, dim):
        return cls(gamma=Tensor(np.ones(dim), requires_grad=True),
                   beta=Tensor(np.zeros(dim), requires_grad=True))


@dataclass
class BiasNormParams:
    bias: Tensor       # per-channel bias, subtracted only inside the RMS
    log_scale: Tensor  # scalar; the applied scale exp(log_scale) is always > 0

    @classmethod
    def create(cls, dim):
        return cls(bias=Tensor(np.zeros(dim), requires_grad=True),
                   log_scale=Tensor(0.0, requires_grad=True))


def layernorm(x, params, eps=LAYERNORM_EPS):
    """(x - E[x]) / sqrt(Var[x] + eps) * gamma + beta over the last axis."""
    m = tz.tmean(x, axis=-1, keepdims=True)
    dev = tz.sub(x, m)
    var = tz.tmean(tz.mul(dev, dev), axis=-1, keepdims=True)
    normed = tz.div(dev, tz.sqrt(tz.add(var, eps)))
    return tz.add(tz.mul(normed, params.gamma), params.beta)


def biasnorm(x, params, eps=BIASNORM_EPS):
    """x / RMS[x - bias] * exp(log_scale) over the last axis.

    No mean subtraction; eps under the sqrt keeps the degenerate x == bias
    input finite.
    """
    dev = tz.sub(x, params.bias)
    ms = tz.tmean(tz.mul(dev, dev), axis=-1, keepdims=True)
    rms = tz.sqrt(tz.add(ms, eps))
    return tz.mul(tz.div(x, rms), tz.exp(params.log_scale))
