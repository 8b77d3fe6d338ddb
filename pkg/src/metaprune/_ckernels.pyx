# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (float64, C-contiguous inputs only)."""

import numpy as np


def im2col(const double[:, :, :, ::1] xp, int kh, int kw, int stride, int ho, int wo):
    cdef Py_ssize_t n = xp.shape[0]
    cdef Py_ssize_t c = xp.shape[1]
    out = np.empty((n * ho * wo, c * kh * kw), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, p, q, row, col, y0, x0
    with nogil:
        for b in range(n):
            for i in range(ho):
                y0 = i * stride
                for j in range(wo):
                    x0 = j * stride
                    row = (b * ho + i) * wo + j
                    col = 0
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                cols[row, col] = xp[b, ch, y0 + p, x0 + q]
                                col = col + 1
    return out


def col2im(const double[:, ::1] cols, int n, int c, int hp, int wp,
           int kh, int kw, int stride, int ho, int wo):
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, i, j, p, q, row, col, y0, x0
    with nogil:
        for b in range(n):
            for i in range(ho):
                y0 = i * stride
                for j in range(wo):
                    x0 = j * stride
                    row = (b * ho + i) * wo + j
                    col = 0
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                dx[b, ch, y0 + p, x0 + q] += cols[row, col]
                                col = col + 1
    return out


def depthwise_forward(const double[:, :, :, ::1] xp, const double[:, :, ::1] w,
                      int stride, int ho, int wo):
    cdef Py_ssize_t n = xp.shape[0]
    cdef Py_ssize_t c = xp.shape[1]
    cdef Py_ssize_t kh = w.shape[1]
    cdef Py_ssize_t kw = w.shape[2]
    out = np.zeros((n, c, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t b, ch, i, j, p, q
    cdef double acc
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        acc = 0.0
                        for p in range(kh):
                            for q in range(kw):
                                acc = acc + w[ch, p, q] * xp[b, ch, i * stride + p, j * stride + q]
                        y[b, ch, i, j] = acc
    return out


def depthwise_backward(const double[:, :, :, ::1] xp, const double[:, :, ::1] w,
                       const double[:, :, :, ::1] g, int stride):
    """Return (grad wrt padded input, grad wrt weight[C,kh,kw])."""
    cdef Py_ssize_t n = g.shape[0]
    cdef Py_ssize_t c = g.shape[1]
    cdef Py_ssize_t ho = g.shape[2]
    cdef Py_ssize_t wo = g.shape[3]
    cdef Py_ssize_t kh = w.shape[1]
    cdef Py_ssize_t kw = w.shape[2]
    dx_arr = np.zeros((xp.shape[0], xp.shape[1], xp.shape[2], xp.shape[3]), dtype=np.float64)
    dw_arr = np.zeros((c, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, :, ::1] dw = dw_arr
    cdef Py_ssize_t b, ch, i, j, p, q, y, x
    cdef double gv
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        gv = g[b, ch, i, j]
                        for p in range(kh):
                            y = i * stride + p
                            for q in range(kw):
                                x = j * stride + q
                                dw[ch, p, q] += gv * xp[b, ch, y, x]
                                dx[b, ch, y, x] += gv * w[ch, p, q]
    return dx_arr, dw_arr
