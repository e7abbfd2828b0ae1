"""Pure-numpy convolution kernels (fallback backend).

All convolutions use zero same-padding. Strided convs follow the ceil
length rule: out_len = ceil(in_len / stride), with total padding
max((out_len - 1) * stride + k - in_len, 0) split front-biased-low
(pad_front = total // 2).

Each forward loops over kernel taps with vectorized slice arithmetic, so
the Python-level loop count is the tap count, not the element count.
"""

import numpy as np

NAME = "numpy"


def _pad_amount(n, stride, k):
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def dwconv1d_forward(x, kern):
    """Depthwise conv of x[T, C] with kern[K, C], K odd, same padding."""
    T, C = x.shape
    K = kern.shape[0]
    P = (K - 1) // 2
    xp = np.zeros((T + K - 1, C))
    xp[P:P + T] = x
    out = np.zeros((T, C))
    for j in range(K):
        out += xp[j:j + T] * kern[j]
    return out


def dwconv1d_backward(g, x, kern):
    """Returns (grad_x, grad_kern) for dwconv1d_forward."""
    T, C = x.shape
    K = kern.shape[0]
    P = (K - 1) // 2
    xp = np.zeros((T + K - 1, C))
    xp[P:P + T] = x
    gx = dwconv1d_forward(g, kern[::-1])
    gk = np.empty_like(kern)
    for j in range(K):
        gk[j] = np.sum(g * xp[j:j + T], axis=0)
    return gx, gk


def conv2d_forward(x, kern, stride_t, stride_f):
    """Strided conv of x[T, F, Ci] with kern[kT, kF, Ci, Co].

    Output is [ceil(T/stride_t), ceil(F/stride_f), Co].
    """
    T, F, Ci = x.shape
    kT, kF, _, Co = kern.shape
    oT, ptf, ptb = _pad_amount(T, stride_t, kT)
    oF, pff, pfb = _pad_amount(F, stride_f, kF)
    xp = np.zeros((T + ptf + ptb, F + pff + pfb, Ci))
    xp[ptf:ptf + T, pff:pff + F] = x
    out = np.zeros((oT, oF, Co))
    for i in range(kT):
        for j in range(kF):
            sl = xp[i:i + stride_t * oT:stride_t, j:j + stride_f * oF:stride_f]
            out += np.tensordot(sl, kern[i, j], axes=([2], [0]))
    return out


def conv2d_backward(g, x, kern, stride_t, stride_f):
    """Returns (grad_x, grad_kern) for conv2d_forward."""
    T, F, Ci = x.shape
    kT, kF, _, Co = kern.shape
    oT, ptf, ptb = _pad_amount(T, stride_t, kT)
    oF, pff, pfb = _pad_amount(F, stride_f, kF)
    xp = np.zeros((T + ptf + ptb, F + pff + pfb, Ci))
    xp[ptf:ptf + T, pff:pff + F] = x
    gxp = np.zeros_like(xp)
    gk = np.zeros_like(kern)
    for i in range(kT):
        for j in range(kF):
            sl = xp[i:i + stride_t * oT:stride_t, j:j + stride_f * oF:stride_f]
            gk[i, j] = np.tensordot(sl, g, axes=([0, 1], [0, 1]))
            gxp[i:i + stride_t * oT:stride_t, j:j + stride_f * oF:stride_f] += (
                np.tensordot(g, kern[i, j], axes=([2], [1])))
    return gxp[ptf:ptf + T, pff:pff + F], gk


def dwconv2d_forward(x, kern):
    """Depthwise conv of x[T, F, C] with kern[kT, kF, C], stride 1."""
    T, F, C = x.shape
    kT, kF, _ = kern.shape
    _, ptf, ptb = _pad_amount(T, 1, kT)
    _, pff, pfb = _pad_amount(F, 1, kF)
    xp = np.zeros((T + ptf + ptb, F + pff + pfb, C))
    xp[ptf:ptf + T, pff:pff + F] = x
    out = np.zeros((T, F, C))
    for i in range(kT):
        for j in range(kF):
            out += xp[i:i + T, j:j + F] * kern[i, j]
    return out


def dwconv2d_backward(g, x, kern):
    """Returns (grad_x, grad_kern) for dwconv2d_forward."""
    T, F, C = x.shape
    kT, kF, _ = kern.shape
    _, ptf, ptb = _pad_amount(T, 1, kT)
    _, pff, pfb = _pad_amount(F, 1, kF)
    xp = np.zeros((T + ptf + ptb, F + pff + pfb, C))
    xp[ptf:ptf + T, pff:pff + F] = x
    gk = np.empty_like(kern)
    gx = dwconv2d_forward(g, kern[::-1, ::-1])
    for i in range(kT):
        for j in range(kF):
            gk[i, j] = np.sum(g * xp[i:i + T, j:j + F], axis=(0, 1))
    return gx, gk
