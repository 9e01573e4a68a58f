"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

A :class:`Tape` records every differentiable op executed inside its ``with``
block, in execution order.  :func:`backward` replays that list once, in
reverse, accumulating gradients into ``.grad`` buffers.  There is no implicit
global graph: no tape active means no recording, which is how evaluation runs
without gradient overhead.

Conventions
-----------
* values are always float64, C-contiguous, and finite; every op validates
  finiteness of its output at construction and raises FloatingPointError
  otherwise (the trainer turns that into a diagnostic abort).
* ``grad`` is allocated (zero-filled) exactly when ``requires_grad`` is set.
* a tape drives one backward pass; a second call on the same tape errors.
"""

import numpy as np

from . import kernels

_ACTIVE_TAPE = None


class Tape:
    """Ordered record of ops for one forward pass."""

    __slots__ = ("nodes", "_spent")

    def __init__(self):
        self.nodes = []
        self._spent = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already recording; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


class _Node:
    __slots__ = ("name", "inputs", "output", "fn")

    def __init__(self, name, inputs, output, fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.fn = fn


class Tensor:
    """Immutable-by-convention float64 array plus an optional gradient buffer."""

    __slots__ = ("values", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad=False):
        # np.ascontiguousarray would promote 0-d to 1-d; keep scalars scalar
        arr = np.array(values, dtype=np.float64, copy=None, order="C")
        if not np.isfinite(arr).all():
            raise FloatingPointError("tensor holds non-finite values")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise ValueError(f"item() on tensor of size {self.values.size}")
        return float(self.values.reshape(()))

    def detach(self):
        """Same values, no gradient, no tape history."""
        return Tensor(self.values)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def backward(t):
    """Run the reverse pass from scalar ``t`` through the tape that made it."""
    if not isinstance(t, Tensor) or t._tape is None:
        raise RuntimeError("backward: tensor was not produced by a recorded op")
    if t.values.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {t.values.shape}")
    tape = t._tape
    if tape._spent:
        raise RuntimeError("backward: tape already consumed; record a new forward pass")
    tape._spent = True
    t.grad[...] = 1.0
    for node in reversed(tape.nodes):
        node.fn()
    # the graph holds Tensor -> Tape -> _Node -> Tensor cycles; dropping the
    # nodes here lets plain refcounting free batch-sized buffers promptly
    tape.nodes.clear()


def _result(values, name):
    try:
        return Tensor(values)
    except FloatingPointError:
        raise FloatingPointError(f"{name} produced non-finite values") from None


def _record(name, out, inputs, fn):
    # caller guarantees an active tape and at least one grad-requiring input
    out.requires_grad = True
    out.grad = np.zeros_like(out.values)
    out._tape = _ACTIVE_TAPE
    _ACTIVE_TAPE.nodes.append(_Node(name, inputs, out, fn))


def _tracks(*tensors):
    if _ACTIVE_TAPE is None:
        return False
    return any(isinstance(t, Tensor) and t.requires_grad for t in tensors)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _vals(x):
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    out = _result(_vals(a) + _vals(b), "add")
    if _tracks(a, b):

        def fn():
            if isinstance(a, Tensor) and a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.shape)
            if isinstance(b, Tensor) and b.requires_grad:
                b.grad += _unbroadcast(out.grad, b.shape)

        _record("add", out, (a, b), fn)
    return out


def sub(a, b):
    out = _result(_vals(a) - _vals(b), "sub")
    if _tracks(a, b):

        def fn():
            if isinstance(a, Tensor) and a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.shape)
            if isinstance(b, Tensor) and b.requires_grad:
                b.grad -= _unbroadcast(out.grad, b.shape)

        _record("sub", out, (a, b), fn)
    return out


def mul(a, b):
    av, bv = _vals(a), _vals(b)
    out = _result(av * bv, "mul")
    if _tracks(a, b):

        def fn():
            if isinstance(a, Tensor) and a.requires_grad:
                a.grad += _unbroadcast(out.grad * bv, a.shape)
            if isinstance(b, Tensor) and b.requires_grad:
                b.grad += _unbroadcast(out.grad * av, b.shape)

        _record("mul", out, (a, b), fn)
    return out


def div(a, b):
    av, bv = _vals(a), _vals(b)
    out = _result(av / bv, "div")
    if _tracks(a, b):

        def fn():
            if isinstance(a, Tensor) and a.requires_grad:
                a.grad += _unbroadcast(out.grad / bv, a.shape)
            if isinstance(b, Tensor) and b.requires_grad:
                b.grad += _unbroadcast(-out.grad * av / (bv * bv), b.shape)

        _record("div", out, (a, b), fn)
    return out


def neg(a):
    out = _result(-a.values, "neg")
    if _tracks(a):

        def fn():
            a.grad -= out.grad

        _record("neg", out, (a,), fn)
    return out


def exp(a):
    out = _result(np.exp(a.values), "exp")
    if _tracks(a):

        def fn():
            a.grad += out.grad * out.values

        _record("exp", out, (a,), fn)
    return out


def log(a):
    out = _result(np.log(a.values), "log")
    if _tracks(a):

        def fn():
            a.grad += out.grad / a.values

        _record("log", out, (a,), fn)
    return out


def sqrt(a):
    out = _result(np.sqrt(a.values), "sqrt")
    if _tracks(a):

        def fn():
            a.grad += out.grad * 0.5 / out.values

        _record("sqrt", out, (a,), fn)
    return out


def unary_from(x, values, grad_fn, name="unary_from"):
    """Build a tensor from precomputed ``values`` with a custom backward rule.

    ``grad_fn(g)`` maps the upstream gradient to the gradient w.r.t. ``x``.
    This is the escape hatch for ops whose forward is not differentiable in
    the usual sense (spike firing uses it to pair a hard forward with a
    smooth backward).
    """
    out = _result(values, name)
    if _tracks(x):

        def fn():
            x.grad += grad_fn(out.grad)

        _record(name, out, (x,), fn)
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(a, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.ndim)
    out = _result(a.values.sum(axis=axes, keepdims=keepdims), "sum")
    if _tracks(a):

        def fn():
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axes)
            a.grad += np.broadcast_to(g, a.shape)

        _record("sum", out, (a,), fn)
    return out


def mean(a, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = _result(a.values.mean(axis=axes, keepdims=keepdims), "mean")
    if _tracks(a):

        def fn():
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axes)
            a.grad += np.broadcast_to(g, a.shape) / count

        _record("mean", out, (a,), fn)
    return out


def reshape(a, shape):
    out = _result(a.values.reshape(shape), "reshape")
    if _tracks(a):

        def fn():
            a.grad += out.grad.reshape(a.shape)

        _record("reshape", out, (a,), fn)
    return out


def slice_rows(a, start, stop):
    out = _result(a.values[start:stop].copy(), "slice_rows")
    if _tracks(a):

        def fn():
            a.grad[start:stop] += out.grad

        _record("slice_rows", out, (a,), fn)
    return out


def concat_rows(parts):
    out = _result(np.concatenate([p.values for p in parts], axis=0), "concat_rows")
    if _tracks(*parts):

        def fn():
            offset = 0
            for p in parts:
                n = p.shape[0]
                if p.requires_grad:
                    p.grad += out.grad[offset : offset + n]
                offset += n

        _record("concat_rows", out, tuple(parts), fn)
    return out


def tile_rows(a, reps):
    """Stack ``reps`` copies of ``a`` along axis 0."""
    out = _result(np.tile(a.values, (reps,) + (1,) * (a.ndim - 1)), "tile_rows")
    if _tracks(a):

        def fn():
            a.grad += out.grad.reshape((reps,) + a.shape).sum(axis=0)

        _record("tile_rows", out, (a,), fn)
    return out


def take_per_row(a, cols):
    """Gather one element per row of a 2-d tensor: out[i] = a[i, cols[i]]."""
    cols = np.asarray(cols)
    rows = np.arange(a.shape[0])
    out = _result(a.values[rows, cols], "take_per_row")
    if _tracks(a):

        def fn():
            a.grad[rows, cols] += out.grad

        _record("take_per_row", out, (a,), fn)
    return out


# ---------------------------------------------------------------------------
# linear algebra and fused layers


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul: expects 2-d operands, got {a.ndim}-d and {b.ndim}-d")
    out = _result(a.values @ b.values, "matmul")
    if _tracks(a, b):

        def fn():
            if a.requires_grad:
                a.grad += out.grad @ b.values.T
            if b.requires_grad:
                b.grad += a.values.T @ out.grad

        _record("matmul", out, (a, b), fn)
    return out


def softmax(a):
    """Row-wise softmax over the last axis, fused forward/backward."""
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, "softmax")
    if _tracks(a):

        def fn():
            g = out.grad
            a.grad += y * (g - (g * y).sum(axis=-1, keepdims=True))

        _record("softmax", out, (a,), fn)
    return out


def conv2d(x, w, stride=1, pad=0):
    """2-d cross-correlation of (B,C,H,W) with filters (F,C,k,k)."""
    y = kernels.conv2d_forward(_vals(x), w.values, stride, pad)
    out = _result(y, "conv2d")
    if _tracks(x, w):

        def fn():
            gx, gw = kernels.conv2d_backward(_vals(x), w.values, out.grad, stride, pad)
            if isinstance(x, Tensor) and x.requires_grad:
                x.grad += gx
            if w.requires_grad:
                w.grad += gw

        _record("conv2d", out, (x, w), fn)
    return out


def maxpool2d(x, k):
    """Non-overlapping k-by-k max pooling; ties go to the lowest flat index."""
    y, idx = kernels.maxpool2d_forward(x.values, k)
    out = _result(y, "maxpool2d")
    if _tracks(x):

        def fn():
            x.grad += kernels.maxpool2d_backward(out.grad, idx, x.shape, k)

        _record("maxpool2d", out, (x,), fn)
    return out


def batchnorm(x, gamma, beta, running_mean, running_var, *, training,
              momentum=0.1, eps=1e-5):
    """Batch normalization over all axes but the channel axis (axis 1).

    Training mode normalizes with batch statistics (biased variance, 1/N)
    and updates ``running_mean`` / ``running_var`` in place via exponential
    moving average.  Eval mode applies the running statistics unchanged.
    """
    if x.ndim not in (2, 4):
        raise ValueError(f"batchnorm: expects 2-d or 4-d input, got {x.ndim}-d")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    pshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    gv = gamma.values.reshape(pshape)
    bv = beta.values.reshape(pshape)

    if training:
        mu = x.values.mean(axis=axes)
        var = x.values.var(axis=axes)  # biased, 1/N
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var

    sigma = np.sqrt(var + eps).reshape(pshape)
    xhat = (x.values - mu.reshape(pshape)) / sigma
    out = _result(gv * xhat + bv, "batchnorm")

    if _tracks(x, gamma, beta):
        count = x.size // x.shape[1]

        def fn():
            g = out.grad
            if gamma.requires_grad:
                gamma.grad += (g * xhat).sum(axis=axes)
            if beta.requires_grad:
                beta.grad += g.sum(axis=axes)
            if x.requires_grad:
                if training:
                    gsum = g.sum(axis=axes, keepdims=True)
                    gx_dot = (g * xhat).sum(axis=axes, keepdims=True)
                    x.grad += (gv / sigma) * (g - gsum / count - xhat * gx_dot / count)
                else:
                    x.grad += g * gv / sigma

        _record("batchnorm", out, (x, gamma, beta), fn)
    return out


def dropout(x, p, *, training, stream):
    """Inverted dropout with counter-based masks.

    The mask is a pure function of the stream coordinates (seed, layer,
    sample id, timestep), independent of batch composition and evaluation
    order.  Identity when not training or p == 0.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    width = int(np.prod(x.shape[1:], dtype=np.int64))
    keep = (stream.uniforms(width).reshape(x.shape) >= p) / (1.0 - p)
    out = _result(x.values * keep, "dropout")
    if _tracks(x):

        def fn():
            x.grad += out.grad * keep

        _record("dropout", out, (x,), fn)
    return out
