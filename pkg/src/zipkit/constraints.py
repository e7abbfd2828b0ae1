"""Balancer and Whitener: backward-only activation-statistics constraints.

Both attach points are identity in the forward pass. During backward they
differentiate an auxiliary penalty on a nested tape, rescale that
gradient, and add it to the incoming one:

* balancer: g + alpha * (g_pen / RMS[g_pen]) * |g|, per element. The |g|
  factor keeps the injection away from positions that carry no gradient
  (e.g. padding frames).
* whitener: g + g_pen * (alpha * l2(g) / l2(g_pen)), applied only while
  the whitening metric exceeds ``w_min``.

Channel statistics pool over all non-channel axes. The clamp targets
inside the balancer penalty are treated as constants (no gradient through
the bound values).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import Tensor

VAR_EPS = 1e-20  # under the sqrt; keeps zero-variance channels finite


def pos_to_meanstd(p):
    """Maps a proportion-positive to the matching E/sqrt(Var) level.

    arctanh(2p - 1) / (sqrt(pi) * ln 2); odd around p = 0.5, monotone
    increasing. p must lie strictly inside (0, 1).
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"proportion must be in (0, 1), got {p}")
    return math.atanh(2.0 * p - 1.0) / (math.sqrt(math.pi) * math.log(2.0))


def abs_to_rms(a):
    """Maps a mean-absolute-value level to an RMS level: sqrt(pi/2) * a."""
    if a < 0.0:
        raise ValueError(f"mean-abs value must be >= 0, got {a}")
    return math.sqrt(math.pi / 2.0) * a


@dataclass
class BalancerConfig:
    a_min: float = 0.2    # bounds on per-channel mean |x|
    a_max: float = 100.0
    p_min: float = 0.05   # bounds on per-channel proportion of positives
    p_max: float = 0.95
    alpha: float = 0.04   # injected-gradient scale

    def __post_init__(self):
        if not (0.0 <= self.p_min < self.p_max <= 1.0):
            raise ValueError("need 0 <= p_min < p_max <= 1")
        if not (0.0 < self.a_min <= self.a_max):
            raise ValueError("need 0 < a_min <= a_max")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be > 0")

    def rms_bounds(self):
        return abs_to_rms(self.a_min), abs_to_rms(self.a_max)

    def meanstd_bounds(self):
        # p bounds at exactly 0/1 map to +-inf; clamp into (0, 1) first
        lo = min(max(self.p_min, 0.05), 0.95)
        hi = min(max(self.p_max, 0.05), 0.95)
        return pos_to_meanstd(lo), pos_to_meanstd(hi)


@dataclass
class WhitenerConfig:
    alpha: float = 0.01
    w_min: float = 10.0

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError("alpha must be > 0")
        if self.w_min < 1.0:
            raise ValueError("w_min must be >= 1 (the metric's minimum)")


def _channel_stats(x):
    """Flattens leading axes; returns (rms, mean/sqrt(var)) per channel."""
    D = x.data.shape[-1]
    flat = tz.reshape(x, (-1, D))
    msq = tz.tmean(tz.mul(flat, flat), axis=0)
    rms = tz.sqrt(tz.add(msq, VAR_EPS))
    m_keep = tz.tmean(flat, axis=0, keepdims=True)
    dev = tz.sub(flat, m_keep)
    var = tz.tmean(tz.mul(dev, dev), axis=0)
    ev = tz.div(tz.reshape(m_keep, (D,)), tz.sqrt(tz.add(var, VAR_EPS)))
    return rms, ev


def balancer_penalty(x, cfg):
    """Channel-statistics penalty, zero when every channel is in bounds.

    Per channel: |log(clamp(RMS, r_min, r_max) / RMS)| +
    |E/sqrt(Var) - clamp(E/sqrt(Var), mu_min, mu_max)|, summed over
    channels. Clamp targets are constants.
    """
    r_min, r_max = cfg.rms_bounds()
    mu_min, mu_max = cfg.meanstd_bounds()
    rms, ev = _channel_stats(x)
    r_target = Tensor(np.clip(rms.data, r_min, r_max))
    l_rms = tz.tsum(tz.absolute(tz.sub(tz.log(r_target), tz.log(rms))))
    ev_target = Tensor(np.clip(ev.data, mu_min, mu_max))
    l_ev = tz.tsum(tz.absolute(tz.sub(ev, ev_target)))
    return tz.add(l_rms, l_ev)


def whitener_metric(x):
    """Eigenvalue-dispersion metric of the channel covariance.

    (sum of squared eigenvalues / D) / (mean eigenvalue)^2, computed from
    the covariance's Frobenius norm and trace; >= 1, equal exactly when
    all eigenvalues agree. x is [N, D] with N >= 2. Mean subtraction and
    a 1/N normalization happen first (the metric is scale-invariant; the
    normalization only tames the numeric range). An all-zero centered
    input yields 1.0 by convention.
    """
    if x.ndim != 2:
        raise tz.ShapeError(f"whitener metric expects [N, D], got {x.shape}")
    N, D = x.data.shape
    if N < 2:
        raise tz.ShapeError(f"whitener metric needs N >= 2, got N={N}")
    m = tz.tmean(x, axis=0, keepdims=True)
    xc = tz.sub(x, m)
    cov = tz.mul(tz.matmul(tz.transpose(xc), xc), 1.0 / N)
    trace_val = float(np.trace(cov.data))
    if trace_val <= 0.0:
        return Tensor(1.0)
    num = tz.div(tz.tsum(tz.mul(cov, cov)), float(D))
    tr = tz.div(tz.tsum(tz.mul(cov, Tensor(np.eye(D)))), float(D))
    return tz.div(num, tz.mul(tr, tr))


def _nested_grad(build_penalty, x_value):
    """Gradient of a penalty at fixed activation values, on its own tape."""
    with tz.fresh_tape():
        leaf = Tensor(x_value, requires_grad=True)
        pen = build_penalty(leaf)
        if pen._tape is None or float(pen.data) == 0.0:
            return None
        tz.backward(pen)
    return leaf.grad


def attach_balancer(x, cfg):
    """Identity forward; injects the balancer-penalty gradient in backward."""
    out = Tensor(x.data)
    if tz._grad_enabled and x._needs_grad():
        x_value = x.data

        def bw(g):
            gp = _nested_grad(lambda leaf: balancer_penalty(leaf, cfg), x_value)
            if gp is None:
                tz._accum(x, g)
                return
            rms = float(np.sqrt(np.mean(gp * gp)))
            if rms == 0.0:
                tz._accum(x, g)
                return
            tz._accum(x, g + cfg.alpha * (gp / rms) * np.abs(g))
        tz._record(out, bw)
    return out


def attach_whitener(x, cfg):
    """Identity forward; injects the whitening-metric gradient in backward
    while the metric exceeds cfg.w_min."""
    out = Tensor(x.data)
    if tz._grad_enabled and x._needs_grad():
        x_value = x.data

        def bw(g):
            with tz.no_grad():
                metric = float(whitener_metric(Tensor(x_value)).data)
            if metric <= cfg.w_min:
                tz._accum(x, g)
                return
            gp = _nested_grad(whitener_metric, x_value)
            if gp is None:
                tz._accum(x, g)
                return
            norm_p = float(np.linalg.norm(gp))
            if norm_p == 0.0:
                tz._accum(x, g)
                return
            norm_g = float(np.linalg.norm(g))
            tz._accum(x, g + gp * (cfg.alpha * norm_g / norm_p))
        tz._record(out, bw)
    return out
