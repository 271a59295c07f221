"""Dense float64 tensors with tape-based reverse-mode differentiation.

The operator set is intentionally small: exactly what the two-branch
segmentation network needs (elementwise arithmetic, reductions, matmul,
reshape/stack) plus a finite-difference gradient checker. Structured ops
(convolution, sampling, resizing) live in :mod:`hess.ops` and register
themselves on the same tape.
"""

from __future__ import annotations

import contextlib

import numpy as np

# Default element type. Everything runs in float64 (gradient checks need
# the headroom); training may switch to float32 for speed via
# set_default_dtype / using_dtype.
DTYPE = np.float64


def set_default_dtype(dtype):
    global DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("supported dtypes: float32, float64")
    DTYPE = dtype


def get_default_dtype():
    return DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the element type for newly created tensors."""
    prev = DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class _OpRecord:
    """One executed operation: outputs, parents and a backward closure."""

    __slots__ = ("outputs", "parents", "backward", "released")

    def __init__(self, outputs, parents, backward):
        self.outputs = outputs
        self.parents = parents
        self.backward = backward
        self.released = False


class GradTape:
    """Ordered record of executed operations.

    Backward replays the records exactly once each, in reverse execution
    order, then releases the whole tape. A released tape raises on reuse.
    """

    def __init__(self):
        self.records: list[_OpRecord] = []

    def append(self, rec):
        self.records.append(rec)

    def clear(self):
        self.records.clear()


_tape = GradTape()
_recording = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation / profiling)."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


class Tensor:
    """A dense array of float64 values plus optional gradient bookkeeping.

    data is stored row-major (C order). Tensors are treated as immutable
    once produced by an operation; in-place mutation of ``.data`` is only
    done by the optimizer on leaf parameters.
    """

    __slots__ = ("data", "requires_grad", "grad", "_record")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, np.ndarray) and data.dtype == DTYPE:
            arr = np.ascontiguousarray(data)
        else:
            arr = np.ascontiguousarray(np.asarray(data, dtype=DTYPE))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._record = None

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
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph assembly ---------------------------------------------------

    def backward(self):
        """Reverse-replay the tape from this scalar, filling ``.grad``.

        All parameters reachable from the loss accumulate d(loss)/d(param).
        The tape is released afterwards; a second call raises.
        """
        if self.size != 1:
            raise ValueError("backward requires a scalar loss")
        if self._record is None:
            raise RuntimeError("loss was not produced by a recorded forward pass")
        if self._record.released:
            raise RuntimeError("backward called twice on a released tape")
        self.grad = np.ones_like(self.data)
        for rec in reversed(_tape.records):
            if rec.released:
                continue
            grads_out = [o.grad for o in rec.outputs]
            if all(g is None for g in grads_out):
                rec.released = True
                continue
            grads_in = rec.backward(*grads_out)
            for parent, g in zip(rec.parents, grads_in):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g)   # copy: g may alias saved buffers
                else:
                    parent.grad += g
            for o in rec.outputs:
                if o._record is not None:
                    o.grad = None  # intermediates: free once consumed
            rec.released = True
            rec.backward = None
        _tape.clear()

    # -- arithmetic --------------------------------------------------------

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return texp(self)


def constant(data):
    return data if isinstance(data, Tensor) else Tensor(data)


def parameter(data):
    return Tensor(data, requires_grad=True)


def record_op(outputs, parents, backward):
    """Register a multi-output op on the active tape.

    backward receives one upstream gradient per output (None where unused)
    and returns one gradient per parent (None allowed). Outputs inherit
    requires_grad from the parents; nothing is recorded under no_grad.
    """
    if _recording and any(p.requires_grad for p in parents):
        rec = _OpRecord(outputs, parents, backward)
        for o in outputs:
            o.requires_grad = True
            o._record = rec
        _tape.append(rec)
    return outputs


def _single(out_data, parents, backward_single):
    out = Tensor(out_data)
    record_op([out], parents, lambda g: backward_single(g))
    return out


def _unbroadcast(g, shape):
    """Sum g down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = constant(a), constant(b)
    out_data = a.data + b.data
    return _single(out_data, [a, b],
                   lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = constant(a), constant(b)
    out_data = a.data - b.data
    return _single(out_data, [a, b],
                   lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = constant(a), constant(b)
    out_data = a.data * b.data
    return _single(out_data, [a, b],
                   lambda g: (_unbroadcast(g * b.data, a.data.shape),
                              _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = constant(a), constant(b)
    out_data = a.data / b.data
    return _single(out_data, [a, b],
                   lambda g: (_unbroadcast(g / b.data, a.data.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def power(a, p):
    a = constant(a)
    p = float(p)
    out_data = a.data ** p
    return _single(out_data, [a], lambda g: (g * p * a.data ** (p - 1.0),))


def texp(a):
    a = constant(a)
    out_data = np.exp(a.data)
    return _single(out_data, [a], lambda g: (g * out_data,))


def relu(a):
    a = constant(a)
    # where() keeps zeros at +0.0, which the silent-branch bit-exactness
    # checks rely on
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0)
    return _single(out_data, [a], lambda g: (g * mask,))


def sigmoid(a):
    a = constant(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _single(out_data, [a], lambda g: (g * out_data * (1.0 - out_data),))


def tsum(a, axis=None, keepdims=False):
    a = constant(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _single(np.asarray(out_data), [a], backward)


def tmean(a, axis=None, keepdims=False):
    a = constant(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.data.size / max(np.asarray(out_data).size, 1)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / denom,)

    return _single(np.asarray(out_data), [a], backward)


def reshape(a, shape):
    a = constant(a)
    out_data = a.data.reshape(shape)
    return _single(out_data, [a], lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes):
    a = constant(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    return _single(out_data, [a], lambda g: (g.transpose(inv),))


def matmul(a, b):
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data
    return _single(out_data, [a, b],
                   lambda g: (g @ b.data.T, a.data.T @ g))


def stack(tensors, axis=0):
    tensors = [constant(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _single(out_data, tensors, backward)


def narrow0(a, index):
    """a[index] along the leading axis (drops the axis)."""
    a = constant(a)
    out_data = np.ascontiguousarray(a.data[index])

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _single(out_data, [a], backward)


def take_axis(a, axis, index):
    """One slice along an arbitrary axis (drops the axis)."""
    a = constant(a)
    out_data = np.ascontiguousarray(np.take(a.data, index, axis=axis))
    sel = tuple([slice(None)] * axis + [index])

    def backward(g):
        full = np.zeros_like(a.data)
        full[sel] = g
        return (full,)

    return _single(out_data, [a], backward)


# -- gradient checking -----------------------------------------------------


def grad_check(fn, params, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    fn computes a scalar Tensor from the current values of ``params``
    (a list of requires_grad tensors); it must be deterministic. The
    relative error per element uses denominator max(|analytic|,
    |numeric|, 1e-8); the max over all elements of all params is returned.
    """
    for p in params:
        p.grad = None
    out = fn()
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued fn")
    if not np.isfinite(out.data).all():
        raise ValueError("fn returned a non-finite value")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    with no_grad():
        for p, an in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = fn().item()
                flat[i] = orig - eps
                f_minus = fn().item()
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise ValueError("fn returned a non-finite value during probing")
                num = (f_plus - f_minus) / (2.0 * eps)
                rel = abs(aflat[i] - num) / max(abs(aflat[i]), abs(num), 1e-8)
                worst = max(worst, rel)
    return worst
