"""Kernel backend selection.

The compiled extension is used when importable, the numpy fallback otherwise.
``use_backend`` switches at runtime (benchmarks and cross-checks).
"""

from . import _kernels_py

try:
    from . import _ckernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py


def available_backends():
    return ["cython", "python"] if _compiled is not None else ["python"]


def backend():
    return "cython" if _impl is _compiled and _compiled is not None else "python"


def use_backend(name):
    """Select ``"cython"`` or ``"python"``; returns the previous backend name."""
    global _impl
    prev = backend()
    if name == "python":
        _impl = _kernels_py
    elif name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _impl = _compiled
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    return prev


def im2col(xp, kh, kw, stride, ho, wo):
    return _impl.im2col(xp, kh, kw, stride, ho, wo)


def col2im(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    return _impl.col2im(cols, n, c, hp, wp, kh, kw, stride, ho, wo)


def depthwise_forward(xp, w, stride, ho, wo):
    return _impl.depthwise_forward(xp, w, stride, ho, wo)


def depthwise_backward(xp, w, g, stride):
    return _impl.depthwise_backward(xp, w, g, stride)


__all__ = [
    "available_backends",
    "backend",
    "use_backend",
    "im2col",
    "col2im",
    "depthwise_forward",
    "depthwise_backward",
]
