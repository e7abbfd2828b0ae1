# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels (hot-loop backend).

Mirrors numpy_backend exactly: zero same-padding, ceil length rule for
strided convs, front-biased-low padding split.
"""

import numpy as np

NAME = "cython"


cdef inline Py_ssize_t _ceil_div(Py_ssize_t n, Py_ssize_t s):
    return (n + s - 1) // s


def dwconv1d_forward(double[:, ::1] x, double[:, ::1] kern):
    cdef Py_ssize_t T = x.shape[0], C = x.shape[1], K = kern.shape[0]
    cdef Py_ssize_t P = (K - 1) // 2
    out_arr = np.zeros((T, C))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t t, c, j, s
    cdef double kv
    for t in range(T):
        for j in range(K):
            s = t + j - P
            if 0 <= s < T:
                for c in range(C):
                    out[t, c] += x[s, c] * kern[j, c]
    return out_arr


def dwconv1d_backward(double[:, ::1] g, double[:, ::1] x, double[:, ::1] kern):
    cdef Py_ssize_t T = x.shape[0], C = x.shape[1], K = kern.shape[0]
    cdef Py_ssize_t P = (K - 1) // 2
    gx_arr = np.zeros((T, C))
    gk_arr = np.zeros((K, C))
    cdef double[:, ::1] gx = gx_arr
    cdef double[:, ::1] gk = gk_arr
    cdef Py_ssize_t t, c, j, s
    for t in range(T):
        for j in range(K):
            s = t + j - P
            if 0 <= s < T:
                for c in range(C):
                    gx[s, c] += g[t, c] * kern[j, c]
                    gk[j, c] += g[t, c] * x[s, c]
    return gx_arr, gk_arr


def conv2d_forward(double[:, :, ::1] x, double[:, :, :, ::1] kern,
                   Py_ssize_t stride_t, Py_ssize_t stride_f):
    cdef Py_ssize_t T = x.shape[0], F = x.shape[1], Ci = x.shape[2]
    cdef Py_ssize_t kT = kern.shape[0], kF = kern.shape[1], Co = kern.shape[3]
    cdef Py_ssize_t oT = _ceil_div(T, stride_t), oF = _ceil_div(F, stride_f)
    cdef Py_ssize_t ptf = max((oT - 1) * stride_t + kT - T, 0) // 2
    cdef Py_ssize_t pff = max((oF - 1) * stride_f + kF - F, 0) // 2
    out_arr = np.zeros((oT, oF, Co))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t a, b, i, j, ci, co, st, sf
    cdef double acc
    for a in range(oT):
        for b in range(oF):
            for i in range(kT):
                st = a * stride_t + i - ptf
                if st < 0 or st >= T:
                    continue
                for j in range(kF):
                    sf = b * stride_f + j - pff
                    if sf < 0 or sf >= F:
                        continue
                    for co in range(Co):
                        acc = 0.0
                        for ci in range(Ci):
                            acc += x[st, sf, ci] * kern[i, j, ci, co]
                        out[a, b, co] += acc
    return out_arr


def conv2d_backward(double[:, :, ::1] g, double[:, :, ::1] x,
                    double[:, :, :, ::1] kern,
                    Py_ssize_t stride_t, Py_ssize_t stride_f):
    cdef Py_ssize_t T = x.shape[0], F = x.shape[1], Ci = x.shape[2]
    cdef Py_ssize_t kT = kern.shape[0], kF = kern.shape[1], Co = kern.shape[3]
    cdef Py_ssize_t oT = _ceil_div(T, stride_t), oF = _ceil_div(F, stride_f)
    cdef Py_ssize_t ptf = max((oT - 1) * stride_t + kT - T, 0) // 2
    cdef Py_ssize_t pff = max((oF - 1) * stride_f + kF - F, 0) // 2
    gx_arr = np.zeros((T, F, Ci))
    gk_arr = np.zeros((kT, kF, Ci, Co))
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gk = gk_arr
    cdef Py_ssize_t a, b, i, j, ci, co, st, sf
    cdef double gv
    for a in range(oT):
        for b in range(oF):
            for i in range(kT):
                st = a * stride_t + i - ptf
                if st < 0 or st >= T:
                    continue
                for j in range(kF):
                    sf = b * stride_f + j - pff
                    if sf < 0 or sf >= F:
                        continue
                    for co in range(Co):
                        gv = g[a, b, co]
                        for ci in range(Ci):
                            gx[st, sf, ci] += gv * kern[i, j, ci, co]
                            gk[i, j, ci, co] += gv * x[st, sf, ci]
    return gx_arr, gk_arr


def dwconv2d_forward(double[:, :, ::1] x, double[:, :, ::1] kern):
    cdef Py_ssize_t T = x.shape[0], F = x.shape[1], C = x.shape[2]
    cdef Py_ssize_t kT = kern.shape[0], kF = kern.shape[1]
    cdef Py_ssize_t ptf = (kT - 1) // 2, pff = (kF - 1) // 2
    out_arr = np.zeros((T, F, C))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t t, f, i, j, c, st, sf
    for t in range(T):
        for i in range(kT):
            st = t + i - ptf
            if st < 0 or st >= T:
                continue
            for f in range(F):
                for j in range(kF):
                    sf = f + j - pff
                    if sf < 0 or sf >= F:
                        continue
                    for c in range(C):
                        out[t, f, c] += x[st, sf, c] * kern[i, j, c]
    return out_arr


def dwconv2d_backward(double[:, :, ::1] g, double[:, :, ::1] x,
                      double[:, :, ::1] kern):
    cdef Py_ssize_t T = x.shape[0], F = x.shape[1], C = x.shape[2]
    cdef Py_ssize_t kT = kern.shape[0], kF = kern.shape[1]
    cdef Py_ssize_t ptf = (kT - 1) // 2, pff = (kF - 1) // 2
    gx_arr = np.zeros((T, F, C))
    gk_arr = np.zeros((kT, kF, C))
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gk = gk_arr
    cdef Py_ssize_t t, f, i, j, c, st, sf
    for t in range(T):
        for i in range(kT):
            st = t + i - ptf
            if st < 0 or st >= T:
                continue
            for f in range(F):
                for j in range(kF):
                    sf = f + j - pff
                    if sf < 0 or sf >= F:
                        continue
                    for c in range(C):
                        gx[st, sf, c] += g[t, f, c] * kern[i, j, c]
                        gk[i, j, c] += g[t, f, c] * x[st, sf, c]
    return gx_arr, gk_arr
