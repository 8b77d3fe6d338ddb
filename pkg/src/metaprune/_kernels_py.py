"""Pure-numpy versions of the convolution kernels.

Same signatures and layouts as the compiled module; used when the extension
is not built.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
        writeable=False,
    )
    return view.reshape(n * ho * wo, c * kh * kw)


def col2im(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    out = np.zeros((n, c, hp, wp))
    cols6 = cols.reshape(n, ho, wo, c, kh, kw)
    for p in range(kh):
        for q in range(kw):
            out[:, :, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] += (
                cols6[:, :, :, :, p, q].transpose(0, 3, 1, 2)
            )
    return out


def depthwise_forward(xp, w, stride, ho, wo):
    n, c = xp.shape[:2]
    kh, kw = w.shape[1:]
    out = np.zeros((n, c, ho, wo))
    for p in range(kh):
        for q in range(kw):
            window = xp[:, :, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride]
            out += window * w[None, :, p, q, None, None]
    return out


def depthwise_backward(xp, w, g, stride):
    ho, wo = g.shape[2:]
    kh, kw = w.shape[1:]
    dx = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for p in range(kh):
        for q in range(kw):
            ys = slice(p, p + stride * (ho - 1) + 1, stride)
            xs = slice(q, q + stride * (wo - 1) + 1, stride)
            dw[:, p, q] = np.einsum("nchw,nchw->c", g, xp[:, :, ys, xs])
            dx[:, :, ys, xs] += g * w[None, :, p, q, None, None]
    return dx, dw
