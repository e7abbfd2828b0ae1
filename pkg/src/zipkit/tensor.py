"""Dense float64 tensors with a single-use reverse-mode tape.

Values live in numpy arrays and stay float64 throughout (the certification
suite relies on tight finite-difference tolerances). Every differentiable
op appends one backward rule to the ambient tape; ``backward(loss)``
replays the tape once in reverse, accumulates gradients additively, and
retires the tape. Running backward again without re-recording the forward
raises :class:`TapeError`.

Tensors are treated as immutable once they have entered a forward pass.
The tape is single-threaded; independent tapes may live on separate
threads.
"""

from __future__ import annotations

import numpy as np

from ._kernels import backend as _kb


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class ConfigError(ValueError):
    """A structural parameter (kernel size, feature dim, ...) is invalid."""


class TapeError(RuntimeError):
    """Tape misuse: non-scalar loss, or backward on a consumed tape."""


class Tape:
    """Ordered record of backward rules for one forward pass."""

    __slots__ = ("entries", "consumed")

    def __init__(self):
        self.entries = []
        self.consumed = False


_tape = Tape()
_grad_enabled = True


class no_grad:
    """Context manager that pauses tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class fresh_tape:
    """Swaps in an isolated tape, restoring the previous one on exit.

    Used by the constraint ops, which run a nested differentiation of
    their auxiliary penalty while the main backward pass is replaying.
    """

    def __enter__(self):
        global _tape
        self._prev = _tape
        _tape = Tape()
        return _tape

    def __exit__(self, *exc):
        global _tape
        _tape = self._prev
        return False


class Tensor:
    """A float64 value buffer that may participate in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def _needs_grad(self):
        # Live on the ambient tape, or a trainable leaf.
        return self.requires_grad or self._tape is _tape

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, fn):
    out._tape = _tape
    _tape.entries.append((out, fn))


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros(t.data.shape)
    t.grad += g


def _make(out_data, pairs):
    """Builds the op output and records one backward rule.

    ``pairs`` is a list of (input tensor, fn) where fn maps the output
    gradient to that input's gradient contribution. Which inputs need
    gradients is decided here, at record time.
    """
    out = Tensor(out_data)
    if _grad_enabled:
        live = [(t, fn) for t, fn in pairs if t._needs_grad()]
        if live:
            def bw(g):
                for t, fn in live:
                    _accum(t, fn(g))
            _record(out, bw)
    return out


def backward(loss):
    """Replays the tape that recorded ``loss``, in reverse order.

    Gradients accumulate additively into every tensor reachable from the
    loss; leaves keep theirs in ``.grad``. The tape is consumed: a second
    call without re-recording the forward raises :class:`TapeError`.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            _accum(loss, np.ones(loss.data.shape))
            return
        raise TapeError("loss is not connected to any recorded computation")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward; "
                        "re-record the forward pass")
    global _tape
    tape.consumed = True
    if tape is _tape:
        _tape = Tape()
    _accum(loss, np.ones(loss.data.shape))
    for out, fn in reversed(tape.entries):
        g = out.grad
        if g is not None:
            fn(g)
    tape.entries = []


def _unbroadcast(g, shape):
    """Sums g down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ])


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data / b.data, [
        (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data),
                                   b.data.shape)),
    ])


def exp(x):
    x = _as_tensor(x)
    val = np.exp(x.data)
    return _make(val, [(x, lambda g: g * val)])


def log(x):
    x = _as_tensor(x)
    return _make(np.log(x.data), [(x, lambda g: g / x.data)])


def sqrt(x):
    x = _as_tensor(x)
    val = np.sqrt(x.data)
    return _make(val, [(x, lambda g: g * 0.5 / val)])


def tanh(x):
    x = _as_tensor(x)
    val = np.tanh(x.data)
    return _make(val, [(x, lambda g: g * (1.0 - val * val))])


def sigmoid(x):
    x = _as_tensor(x)
    e = np.exp(-np.abs(x.data))
    val = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(val, [(x, lambda g: g * val * (1.0 - val))])


def absolute(x):
    """|x|, with subgradient 0 at exactly 0."""
    x = _as_tensor(x)
    return _make(np.abs(x.data), [(x, lambda g: g * np.sign(x.data))])


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes wherever lo <= x <= hi."""
    x = _as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), [(x, lambda g: g * mask)])


# -- structural ----------------------------------------------------------

def reshape(x, *shape):
    x = _as_tensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return _make(x.data.reshape(shape),
                 [(x, lambda g: g.reshape(x.data.shape))])


def transpose(x, *axes):
    x = _as_tensor(x)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), [(x, lambda g: g.transpose(inv))])


def getitem(x, key):
    x = _as_tensor(x)

    def bw(g):
        gx = np.zeros(x.data.shape)
        gx[key] = g
        return gx
    return _make(x.data[key], [(x, bw)])


def take(x, indices, axis):
    """Gather along one axis by an integer index array (repeats allowed)."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)

    def bw(g):
        gx = np.zeros(x.data.shape)
        np.add.at(gx, (slice(None),) * axis + (idx,), g)
        return gx
    return _make(np.take(x.data, idx, axis=axis), [(x, bw)])


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    nd = out_data.ndim

    def piece(lo, hi):
        sl = (slice(None),) * (axis % nd) + (slice(lo, hi),)
        return lambda g: g[sl]

    return _make(out_data, [
        (t, piece(lo, hi))
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:])
    ])


# -- reductions ----------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    x = _as_tensor(x)

    def bw(g):
        if axis is None:
            return np.broadcast_to(g, x.data.shape)
        ge = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(ge, x.data.shape)
    return _make(x.data.sum(axis=axis, keepdims=keepdims), [(x, bw)])


def tmean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    if axis is None:
        n = x.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        n = x.data.shape[axis]

    def bw(g):
        if axis is None:
            return np.broadcast_to(g / n, x.data.shape)
        ge = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(ge / n, x.data.shape)
    return _make(x.data.mean(axis=axis, keepdims=keepdims), [(x, bw)])


def reduce_stats(x, axis):
    """Per-slice (mean, variance, rms) along one axis, as tape tensors.

    Variance is the biased estimator (divide by the extent); rms is
    sqrt(mean(x^2)).
    """
    x = _as_tensor(x)
    if x.data.shape[axis] < 1:
        raise ShapeError("reduce_stats needs extent >= 1 along the axis")
    m_keep = tmean(x, axis, keepdims=True)
    dev = sub(x, m_keep)
    var = tmean(mul(dev, dev), axis)
    rms = sqrt(tmean(mul(x, x), axis))
    m = tmean(x, axis)
    return m, var, rms


# -- linear algebra ------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, [
        (a, lambda g: g @ np.swapaxes(b.data, -1, -2)),
        (b, lambda g: np.swapaxes(a.data, -1, -2) @ g),
    ])


def softmax_lastdim(x):
    """Row-stochastic softmax over the last axis, max-stabilized."""
    x = _as_tensor(x)
    if x.data.shape[-1] < 1:
        raise ShapeError("softmax needs extent >= 1 on the last axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * val).sum(axis=-1, keepdims=True)
        return val * (g - dot)
    return _make(val, [(x, bw)])


# -- convolution ---------------------------------------------------------

def _conv_op(x, kern, fwd, bwd):
    """Shared wiring for the kernel-backed convolutions.

    The backend backward computes (grad_x, grad_kern) in one call, so the
    two inputs share one closure instead of going through ``_make``.
    """
    out = Tensor(fwd())
    if _grad_enabled:
        nx, nk = x._needs_grad(), kern._needs_grad()
        if nx or nk:
            def bw(g):
                gx, gk = bwd(np.ascontiguousarray(g))
                if nx:
                    _accum(x, gx)
                if nk:
                    _accum(kern, gk)
            _record(out, bw)
    return out


def conv1d_depthwise(x, kern):
    """Per-channel 1-D convolution, zero same-padding, odd kernel.

    x is [T, C], kern is [K, C]; output is [T, C].
    """
    x, kern = _as_tensor(x), _as_tensor(kern)
    if x.ndim != 2 or kern.ndim != 2:
        raise ShapeError("conv1d_depthwise expects x[T,C] and kernel[K,C]")
    if kern.data.shape[0] % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {kern.shape[0]}")
    if kern.data.shape[1] != x.data.shape[1]:
        raise ShapeError(f"kernel channels {kern.shape[1]} != input {x.shape[1]}")
    xd = np.ascontiguousarray(x.data)
    kd = np.ascontiguousarray(kern.data)
    return _conv_op(x, kern,
                    lambda: _kb.dwconv1d_forward(xd, kd),
                    lambda g: _kb.dwconv1d_backward(g, xd, kd))


def conv2d_strided(x, kern, stride_t, stride_f):
    """Strided 2-D cross-correlation with the ceil same-padding rule.

    x is [T, F, Cin], kern is [kT, kF, Cin, Cout]; output is
    [ceil(T/stride_t), ceil(F/stride_f), Cout].
    """
    x, kern = _as_tensor(x), _as_tensor(kern)
    if x.ndim != 3 or kern.ndim != 4:
        raise ShapeError("conv2d_strided expects x[T,F,Ci], kernel[kT,kF,Ci,Co]")
    if 0 in x.data.shape:
        raise ShapeError(f"conv2d input has a zero extent: {x.shape}")
    if stride_t < 1 or stride_f < 1:
        raise ConfigError("conv2d strides must be >= 1")
    if kern.data.shape[2] != x.data.shape[2]:
        raise ShapeError(f"kernel Cin {kern.shape[2]} != input {x.shape[2]}")
    xd = np.ascontiguousarray(x.data)
    kd = np.ascontiguousarray(kern.data)
    return _conv_op(x, kern,
                    lambda: _kb.conv2d_forward(xd, kd, stride_t, stride_f),
                    lambda g: _kb.conv2d_backward(g, xd, kd, stride_t, stride_f))


def conv2d_depthwise(x, kern):
    """Per-channel 2-D convolution, stride 1, odd kernel, same padding.

    x is [T, F, C], kern is [kT, kF, C]; output is [T, F, C].
    """
    x, kern = _as_tensor(x), _as_tensor(kern)
    if x.ndim != 3 or kern.ndim != 3:
        raise ShapeError("conv2d_depthwise expects x[T,F,C] and kernel[kT,kF,C]")
    if kern.data.shape[0] % 2 == 0 or kern.data.shape[1] % 2 == 0:
        raise ConfigError("conv2d_depthwise kernel extents must be odd")
    if kern.data.shape[2] != x.data.shape[2]:
        raise ShapeError(f"kernel channels {kern.shape[2]} != input {x.shape[2]}")
    xd = np.ascontiguousarray(x.data)
    kd = np.ascontiguousarray(kern.data)
    return _conv_op(x, kern,
                    lambda: _kb.dwconv2d_forward(xd, kd),
                    lambda g: _kb.dwconv2d_backward(g, xd, kd))
