# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for strided, zero-padded 2D patches."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef inline (Py_ssize_t, Py_ssize_t) _valid_range(Py_ssize_t j, Py_ssize_t sw, Py_ssize_t pw,
                                                  Py_ssize_t w, Py_ssize_t ow) noexcept nogil:
    # output columns ox whose input column ox*sw - pw + j lies inside [0, w)
    cdef Py_ssize_t lo = 0, hi
    if pw > j:
        lo = (pw - j + sw - 1) // sw
    hi = (w - 1 + pw - j) // sw + 1 if w - 1 + pw - j >= 0 else 0
    if hi > ow:
        hi = ow
    if lo > hi:
        lo = hi
    return lo, hi


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int sh, int sw,
           int ph, int pw, int oh, int ow):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    out = np.zeros((n, c * kh * kw, oh * ow), dtype=np.float64)
    cdef double[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, iy, base, lo, hi
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        lo, hi = _valid_range(j, sw, pw, w, ow)
                        for oy in range(oh):
                            iy = oy * sh - ph + i
                            if iy < 0 or iy >= h:
                                continue
                            base = oy * ow
                            for ox in range(lo, hi):
                                cols[b, row, base + ox] = x[b, ch, iy, ox * sw - pw + j]
    return out


def col2im(const double[:, :, ::1] cols, int c, int h, int w, int kh, int kw,
           int sh, int sw, int ph, int pw, int oh, int ow):
    cdef Py_ssize_t n = cols.shape[0]
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] x = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, iy, base, lo, hi
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        lo, hi = _valid_range(j, sw, pw, w, ow)
                        for oy in range(oh):
                            iy = oy * sh - ph + i
                            if iy < 0 or iy >= h:
                                continue
                            base = oy * ow
                            for ox in range(lo, hi):
                                x[b, ch, iy, ox * sw - pw + j] += cols[b, row, base + ox]
    return out


def adam_update(double[::1] p, const double[::1] g, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double c1, double c2, double eps):
    """Single-pass in-place bias-corrected ADAM update on flat arrays."""
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double gi, mi, vi
    with nogil:
        for i in range(n):
            gi = g[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
            m[i] = mi
            v[i] = vi
            p[i] -= lr * (mi / c1) / (sqrt(vi / c2) + eps)
