"""Kernel dispatch: compiled extension when available, numpy otherwise.

The two backends implement identical contracts and are interchangeable; the
compiled one is preferred at import time.  Set ``CLSNN_KERNELS=numpy`` or
``CLSNN_KERNELS=compiled`` to force a choice (forcing an unavailable backend
raises at import), or call :func:`use` at runtime.
"""

import os

import numpy as np

from . import numpy_backend

try:
    from . import _native
except ImportError:
    _native = None

_BY_NAME = {"numpy": numpy_backend, "compiled": _native}


def _pick(name):
    backend = _BY_NAME.get(name)
    if backend is None:
        raise ImportError(
            f"kernel backend {name!r} is not available; choose from {available()}"
        )
    return backend


def available():
    """Names of importable backends."""
    return [name for name, mod in _BY_NAME.items() if mod is not None]


_forced = os.environ.get("CLSNN_KERNELS", "").strip().lower()
if _forced:
    _active = _pick(_forced)
else:
    _active = _native if _native is not None else numpy_backend


def backend_name():
    """Name of the backend currently serving kernel calls."""
    return "compiled" if _active is _native else "numpy"


def use(name):
    """Switch the active backend; returns the previous backend's name."""
    global _active
    previous = backend_name()
    _active = _pick(name)
    return previous


def _c(arr):
    return np.ascontiguousarray(arr, dtype=np.float64)


def conv2d_forward(x, w, stride=1, pad=0):
    """Cross-correlate ``x`` (B,C,H,W) with ``w`` (F,C,k,k) -> (B,F,Ho,Wo)."""
    x, w = _c(x), _c(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d: x and w must be 4-d")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv2d: channel mismatch, x has {x.shape[1]} and w expects {w.shape[1]}"
        )
    if w.shape[2] != w.shape[3]:
        raise ValueError("conv2d: kernel must be square")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    k = w.shape[2]
    for extent in (x.shape[2], x.shape[3]):
        span = extent + 2 * pad - k
        if span < 0:
            raise ValueError(f"conv2d: kernel {k} exceeds padded extent {extent + 2 * pad}")
        if span % stride:
            raise ValueError("conv2d: stride does not tile the padded extent")
    return _active.conv2d_forward(x, w, stride, pad)


def conv2d_backward(x, w, gy, stride=1, pad=0):
    """Gradients (gx, gw) of conv2d given upstream gy (B,F,Ho,Wo)."""
    return _active.conv2d_backward(_c(x), _c(w), _c(gy), stride, pad)


def maxpool2d_forward(x, k):
    """Non-overlapping k-by-k max pooling; returns (y, argmax indices)."""
    x = _c(x)
    if x.ndim != 4:
        raise ValueError("maxpool2d: x must be 4-d")
    if k < 1 or x.shape[2] % k or x.shape[3] % k:
        raise ValueError(f"maxpool2d: window {k} must divide H={x.shape[2]}, W={x.shape[3]}")
    return _active.maxpool2d_forward(x, k)


def maxpool2d_backward(gy, idx, x_shape, k):
    """Route upstream gy back to the argmax positions recorded by forward."""
    return _active.maxpool2d_backward(_c(gy), np.ascontiguousarray(idx, dtype=np.int64), x_shape, k)
