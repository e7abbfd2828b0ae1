"""Adam, ScaledAdam, the Eden schedule, and shape-batched updates.

Update formulas (per step t, bias correction sqrt(1-b2^t)/(1-b1^t)):

* Adam:       delta = -lr * bias * m / (sqrt(v) + eps)
* ScaledAdam: delta = -lr * r * bias * m / (sqrt(v) + eps)
              - eta * lr * bias * n / (sqrt(w) + eps) * theta
  where r = RMS(theta) before the step, h = sum(g * theta) is the scalar
  scale gradient per tensor, and (n, w) are its moments.

Steps are atomic: a non-finite gradient (or update) rejects the whole
step with :class:`NumericsError`, leaving parameters and moments
untouched. ScaledAdam groups parameters by shape and updates each group
as one stacked array; this is bit-for-bit equivalent to per-tensor
updates and can be disabled with ``batched=False``.
"""

from dataclasses import dataclass

import numpy as np


class NumericsError(RuntimeError):
    """A non-finite gradient or update rejected the optimizer step."""


BETA1 = 0.9
BETA2 = 0.98
EPS = 1e-8
ETA = 0.1


@dataclass
class EdenParams:
    alpha_base: float = 0.045
    alpha_step: float = 7500.0
    alpha_epoch: float = 3.5
    alpha_start: float = 0.5
    t_warmup: float = 500.0

    def __post_init__(self):
        for name in ("alpha_base", "alpha_step", "alpha_epoch", "t_warmup"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.alpha_start <= 1.0:
            raise ValueError("alpha_start must be in (0, 1]")


def eden_lr(params, t, e):
    """Learning rate at step t, epoch e (e may be fractional).

    Product of a step-power factor, an epoch-power factor, and a linear
    warmup ramp from alpha_start to 1 over t_warmup steps.
    """
    step_factor = ((t * t + params.alpha_step ** 2) / params.alpha_step ** 2) ** -0.25
    epoch_factor = ((e * e + params.alpha_epoch ** 2) / params.alpha_epoch ** 2) ** -0.25
    ramp = params.alpha_start + (1.0 - params.alpha_start) * min(t / params.t_warmup, 1.0)
    return params.alpha_base * step_factor * epoch_factor * ramp


def batch_parameters(params):
    """Groups parameters by shape, preserving first-seen order."""
    groups = {}
    for p in params:
        groups.setdefault(p.data.shape, []).append(p)
    return list(groups.values())


def _grad_of(p):
    return p.grad if p.grad is not None else np.zeros(p.data.shape)


def _check_finite_grads(params):
    for p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericsError("non-finite gradient; step rejected")


def _safe_div(num, denom):
    # 0/0 -> 0; only reachable with eps=0 and an all-zero gradient history
    return np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)


class Adam:
    """Adam with the combined bias-correction multiplier."""

    def __init__(self, params, beta1=BETA1, beta2=BETA2, eps=EPS):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros(p.data.shape) for p in self.params]
        self._v = [np.zeros(p.data.shape) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        _check_finite_grads(self.params)
        t = self.t + 1
        bias = np.sqrt(1.0 - self.beta2 ** t) / (1.0 - self.beta1 ** t)
        new = []
        for p, m, v in zip(self.params, self._m, self._v):
            g = _grad_of(p)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            delta = -lr * bias * _safe_div(m, np.sqrt(v) + self.eps)
            theta = p.data + delta
            if not np.isfinite(theta).all():
                raise NumericsError("non-finite update; step rejected")
            new.append((m, v, theta))
        for p, slot, (m, v, theta) in zip(self.params, range(len(new)), new):
            self._m[slot], self._v[slot] = m, v
            p.data = theta
        self.t = t


class ScaledAdam:
    """Adam scaled by each tensor's RMS, with explicit scale learning.

    ``rms_floor`` (off by default) is applied only inside the update
    multiplier, so a zero-initialized tensor is not permanently frozen;
    the stored scale moments always see the true RMS.
    """

    def __init__(self, params, beta1=BETA1, beta2=BETA2, eps=EPS, eta=ETA,
                 rms_floor=0.0, batched=True):
        self.params = list(params)
        self.beta1, self.beta2, self.eps, self.eta = beta1, beta2, eps, eta
        self.rms_floor = rms_floor
        self.batched = batched
        self.t = 0
        self._groups = batch_parameters(self.params) if batched else \
            [[p] for p in self.params]
        self._state = []
        for group in self._groups:
            shape = (len(group),) + group[0].data.shape
            self._state.append({
                "m": np.zeros(shape),
                "v": np.zeros(shape),
                "n": np.zeros(len(group)),
                "w": np.zeros(len(group)),
            })

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def scales(self):
        """Current RMS of every parameter tensor, in parameter order."""
        return [float(np.sqrt(np.mean(p.data ** 2))) for p in self.params]

    def step(self, lr):
        _check_finite_grads(self.params)
        t = self.t + 1
        bias = np.sqrt(1.0 - self.beta2 ** t) / (1.0 - self.beta1 ** t)
        staged = []
        for group, state in zip(self._groups, self._state):
            theta = np.stack([p.data for p in group])
            g = np.stack([_grad_of(p) for p in group])
            elem_axes = tuple(range(1, theta.ndim))
            col = (slice(None),) + (None,) * len(elem_axes)

            h = np.sum(g * theta, axis=elem_axes)
            r = np.sqrt(np.mean(theta * theta, axis=elem_axes))
            m = self.beta1 * state["m"] + (1.0 - self.beta1) * g
            v = self.beta2 * state["v"] + (1.0 - self.beta2) * g * g
            n = self.beta1 * state["n"] + (1.0 - self.beta1) * h
            w = self.beta2 * state["w"] + (1.0 - self.beta2) * h * h

            r_used = np.maximum(r, self.rms_floor) if self.rms_floor > 0 else r
            delta = -lr * bias * r_used[col] * _safe_div(m, np.sqrt(v) + self.eps)
            scale_step = -self.eta * lr * bias * _safe_div(n, np.sqrt(w) + self.eps)
            delta = delta + scale_step[col] * theta

            theta_new = theta + delta
            if not np.isfinite(theta_new).all():
                raise NumericsError("non-finite update; step rejected")
            staged.append((m, v, n, w, theta_new))
        for group, state, (m, v, n, w, theta_new) in zip(
                self._groups, self._state, staged):
            state["m"], state["v"], state["n"], state["w"] = m, v, n, w
            for i, p in enumerate(group):
                p.data = theta_new[i]
        self.t = t


OPTIMIZERS = {"adam": Adam, "scaledadam": ScaledAdam}
