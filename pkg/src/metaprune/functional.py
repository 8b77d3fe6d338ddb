"""Differentiable ops over :class:`~metaprune.tensor.Tensor`.

Convolutions use cross-correlation (no kernel flip) and NCHW layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    A, B = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * B, a.shape) if a.requires_grad else None,
            _unbroadcast(g * A, b.shape) if b.requires_grad else None,
        )

    return record(out, (a, b), backward)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.asarray(a.data.sum()), (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return record(A @ B, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as (in_features, out_features)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    X, W = x.data, w.data
    out = X @ W
    if b is not None:
        out = out + b.data

    def backward(g):
        return (
            g @ W.T if x.requires_grad else None,
            X.T @ g if w.requires_grad else None,
            g.sum(axis=0) if b is not None and b.requires_grad else None,
        )

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return record(x.data * mask, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return record(out, (x,), backward)


def crop(w: Tensor, *sizes: int) -> Tensor:
    """Leading sub-block ``w[0:sizes[0], 0:sizes[1], ...]``.

    ``crop(w, co, ci)`` keeps the top-left ``co x ci`` channel block of a
    (Co, Ci, Kh, Kw) weight. Gradient flows into that region only.
    """
    if not sizes or len(sizes) > w.ndim:
        raise ShapeError(f"crop: {len(sizes)} sizes for a rank-{w.ndim} tensor")
    for axis, (size, extent) in enumerate(zip(sizes, w.shape)):
        if not 1 <= size <= extent:
            raise ShapeError(f"crop: size {size} on axis {axis} outside [1, {extent}] for shape {w.shape}")
    index = tuple(slice(0, int(s)) for s in sizes)
    full = w.shape

    def backward(g):
        out = np.zeros(full)
        out[index] = g
        return (out,)

    return record(w.data[index], (w,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return record(x.data.mean(axis=(2, 3)), (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy over the batch, plus the argmax predictions."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"softmax_cross_entropy: labels outside [0, {logits.shape[1]})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = labels.shape[0]
    rows = np.arange(n)
    loss = (logsum - z[rows, labels]).mean()

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return record(np.asarray(loss), (logits,), backward), logits.data.argmax(axis=1)


def _out_extent(size: int, k: int, stride: int, pad: int, what: str) -> int:
    if stride < 1 or pad < 0:
        raise ShapeError(f"{what}: stride must be >= 1 and pad >= 0")
    extent = (size + 2 * pad - k) // stride + 1
    if size + 2 * pad < k or extent < 1:
        raise ShapeError(f"{what}: kernel {k} does not fit input extent {size} with pad {pad}")
    return extent


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, weight {w.shape} expects {ci}")
    ho = _out_extent(h, kh, stride, pad, "conv2d")
    wo = _out_extent(wd, kw, stride, pad, "conv2d")
    wmat = w.data.reshape(co, -1)

    if kh == kw == 1 and stride == 1 and pad == 0:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
        hp, wp = h, wd
    else:
        xp = _pad(x.data, pad)
        hp, wp = xp.shape[2:]
        cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
    out = (cols @ wmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        dw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = g2 @ wmat
            if kh == kw == 1 and stride == 1 and pad == 0:
                dx = dcols.reshape(n, h, wd, c).transpose(0, 3, 1, 2)
            else:
                dxp = kernels.col2im(np.ascontiguousarray(dcols), n, c, hp, wp, kh, kw, stride, ho, wo)
                dx = dxp[:, :, pad:pad + h, pad:pad + wd]
        return dx, dw

    return record(np.ascontiguousarray(out), (x, w), backward)


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: expects NCHW input and (C,1,Kh,Kw) weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    if w.shape[0] != c:
        raise ShapeError(f"depthwise_conv2d: input has {c} channels, weight {w.shape} has {w.shape[0]}")
    kh, kw = w.shape[2:]
    ho = _out_extent(h, kh, stride, pad, "depthwise_conv2d")
    wo = _out_extent(wd, kw, stride, pad, "depthwise_conv2d")
    xp = _pad(x.data, pad)
    w3 = np.ascontiguousarray(w.data.reshape(c, kh, kw))
    out = kernels.depthwise_forward(xp, w3, stride, ho, wo)

    def backward(g):
        dxp, dw = kernels.depthwise_backward(xp, w3, np.ascontiguousarray(g), stride)
        return (
            dxp[:, :, pad:pad + h, pad:pad + wd] if x.requires_grad else None,
            dw.reshape(w.shape) if w.requires_grad else None,
        )

    return record(out, (x, w), backward)


@dataclass
class BNState:
    """Running statistics for one batch-norm layer.

    ``count`` is the number of batches folded in; it drives the cumulative
    average used when ``momentum`` is ``None``.
    """

    running_mean: np.ndarray
    running_var: np.ndarray
    count: int = 0

    @classmethod
    def fresh(cls, channels: int) -> "BNState":
        return cls(np.zeros(channels), np.ones(channels), 0)

    def copy(self) -> "BNState":
        return BNState(self.running_mean.copy(), self.running_var.copy(), self.count)

    def crop(self, channels: int) -> "BNState":
        """A state viewing the leading ``channels`` entries (updates write through)."""
        return BNState(self.running_mean[:channels], self.running_var[:channels], self.count)


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BNState | None,
    training: bool,
    momentum: float | None = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalization over the channel axis (axis 1) of NCHW or NC input.

    Training mode normalizes with batch statistics and folds them into
    ``state`` (exponential average with ``momentum``, or a cumulative average
    when ``momentum`` is None). Eval mode normalizes with ``state``.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects NC or NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    if state is not None and state.running_mean.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels but running stats {state.running_mean.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    X = x.data
    m = X.size // c

    if training:
        mean = X.mean(axis=axes)
        var = X.var(axis=axes)
        if state is not None:
            unbiased = var * m / (m - 1) if m > 1 else var
            state.count += 1
            w = 1.0 / state.count if momentum is None else momentum
            state.running_mean *= 1.0 - w
            state.running_mean += w * mean
            state.running_var *= 1.0 - w
            state.running_var += w * unbiased
    else:
        if state is None:
            raise ValueError("batchnorm eval mode needs running statistics")
        mean, var = state.running_mean, state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (X - mean.reshape(bshape)) * inv_std.reshape(bshape)
    G = gamma.data
    out = xhat * G.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * G.reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                dx = (inv_std.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return record(out, (x, gamma, beta), backward)


@dataclass
class SGD:
    """SGD with heavy-ball momentum and L2 weight decay."""

    params: list
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, self.lr, self.momentum, self.weight_decay, self.velocity)


def sgd_step(params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0, velocity: dict | None = None) -> None:
    """In-place parameter update; ``velocity`` is keyed by ``id(param)``."""
    if velocity is None:
        velocity = {}
    for p in params:
        if p.grad is None:
            continue
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        if momentum:
            v = velocity.get(id(p))
            v = g.copy() if v is None else momentum * v + g
            velocity[id(p)] = v
            g = v
        p.data -= lr * g
