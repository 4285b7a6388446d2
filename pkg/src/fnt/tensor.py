"""Reverse-mode automatic differentiation over numpy buffers.

Exactly the operations the transducer models need. Values are dense
row-major arrays; operations executed inside an active :class:`GradTape`
are recorded and replayed in reverse by ``backward``. Two precisions are
supported via a process-global default dtype: float32 for training,
float64 for gradient verification (finite differences are meaningless in
32-bit).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import NumericsError, ShapeError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = threading.local()


def _tls():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.dtype = np.float32
    return _state


def set_default_dtype(name):
    """Select the process precision mode: 'float32' or 'float64'."""
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}")
    _tls().dtype = _DTYPES[name]


def default_dtype():
    return _tls().dtype


@contextmanager
def dtype_scope(name):
    """Temporarily switch the default dtype (verification runs use float64)."""
    st = _tls()
    prev = st.dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        st.dtype = prev


class GradTape:
    """Ordered record of executed operations.

    Operations run while a tape is active append one record each; the
    reverse pass walks the records once, last to first, so every node is
    visited exactly once. Tensors created outside any tape build no graph
    (inference mode).
    """

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn)

    def __enter__(self):
        _tls().tapes.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tls().tapes.pop()
        assert popped is self

    def _record(self, out, inputs, backward_fn):
        self._records.append((out, inputs, backward_fn))

    def backward(self, loss):
        """Accumulate d(loss)/d(node) into ``grad`` of every reachable node."""
        if loss.size != 1:
            raise NumericsError("backward requires a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self._records):
            if out.grad is None:
                continue
            fn(out.grad)
        return self


def active_tape():
    tapes = _tls().tapes
    return tapes[-1] if tapes else None


class Tensor:
    """Dense array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        tape = active_tape()
        if tape is None:
            raise NumericsError("backward() called with no active GradTape")
        tape.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class Parameter(Tensor):
    """Trainable tensor with a stable name (checkpoint key)."""

    __slots__ = ("name",)

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward_fn):
    """Build an op output, recording it when a tape is active and any input needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------
# elementwise / broadcast arithmetic
# ---------------------------------------------------------------------

def add(a, b):
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def scale(a, k):
    """Multiply by a python constant (no gradient for k)."""
    k = a.data.dtype.type(k)
    data = a.data * k

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * k)

    return _make(data, (a,), backward)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(data, (a, b), backward)


# ---------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------

def reshape(a, shape):
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a, axes=None):
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(g, inv))

    return _make(data, (a,), backward)


def slice_(a, key):
    data = a.data[key]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] += g  # basic indexing only; non-aliasing
            a.accumulate_grad(full)

    return _make(data, (a,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _make(data, tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for t, gi in zip(tensors, parts):
            if t.requires_grad:
                t.accumulate_grad(gi)

    return _make(data, tuple(tensors), backward)


def embedding(table, ids):
    """Row lookup; backward scatter-adds into the table rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("embedding", ids.shape, table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise NumericsError(f"embedding ids out of range [0, {table.shape[0]})")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table.accumulate_grad(full)

    return _make(data, (table,), backward)


def gather_rows(a, idx):
    """out[i] = a[i, idx[i]] for a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError("gather_rows", a.shape, idx.shape)
    rows = np.arange(a.shape[0])
    data = a.data[rows, idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, (rows, idx), g)
            a.accumulate_grad(full)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------

def relu(a):
    data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _make(data, (a,), backward)


def sigmoid(a):
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def tanh(a):
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - data * data))

    return _make(data, (a,), backward)


def swish(a):
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (sig + a.data * sig * (1.0 - sig)))

    return _make(data, (a,), backward)


def exp(a):
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * data)

    return _make(data, (a,), backward)


def log(a):
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _make(data, (a,), backward)


def dropout(a, rate, rng):
    """Train-only inverted dropout; verification/acceptance runs keep rate 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype)
    k = a.data.dtype.type(1.0 / (1.0 - rate))
    data = a.data * keep * k

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * keep * k)

    return _make(data, (a,), backward)


def masked_fill(a, mask, value):
    """Set positions where ``mask`` is False to ``value`` (no grad there)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError("masked_fill", a.shape, mask.shape)
    data = np.where(mask, a.data, a.data.dtype.type(value))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.where(mask, g, 0.0))

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------
# normalized exponentials
# ---------------------------------------------------------------------

def softmax(a, axis=-1):
    if np.isnan(a.data).any():
        raise NumericsError("softmax: NaN input")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a.accumulate_grad(data * (g - dot))

    return _make(data, (a,), backward)


def log_softmax(a, axis=-1):
    if np.isnan(a.data).any():
        raise NumericsError("log_softmax: NaN input")
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)  # all -inf row: keep finite shift
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward(g):
        if a.requires_grad:
            tot = g.sum(axis=axis, keepdims=True)
            a.accumulate_grad(g - np.exp(data) * tot)

    return _make(data, (a,), backward)


def logsumexp(a, axis=None, keepdims=False):
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    if not keepdims:
        data = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)
    else:
        data = out

    soft = e / s

    def backward(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.shape) * soft)

    return _make(data, (a,), backward)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise NumericsError("layer_norm: eps must be > 0")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data
    n = a.shape[-1]

    def backward(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, n).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            t1 = gx.sum(axis=-1, keepdims=True)
            t2 = (gx * xhat).sum(axis=-1, keepdims=True)
            a.accumulate_grad(inv * (gx - t1 / n - xhat * t2 / n))

    return _make(data, (a, gain, bias), backward)


def mean_std_pool(c, eps=1e-5):
    """Pool an L-by-d matrix to [column means, sqrt(population variance + eps)]."""
    if c.ndim != 2:
        raise ShapeError("mean_std_pool", c.shape)
    L, d = c.shape
    if L == 0:
        raise NumericsError("mean_std_pool: empty input (substitute the no-history embedding)")
    mu = c.data.mean(axis=0)
    xc = c.data - mu
    var = (xc * xc).mean(axis=0)
    std = np.sqrt(var + eps)
    data = np.concatenate([mu, std])

    def backward(g):
        if c.requires_grad:
            gm, gs = g[:d], g[d:]
            c.accumulate_grad(gm / L + xc * (gs / (std * L)))

    return _make(data, (c,), backward)


# ---------------------------------------------------------------------
# convolutions (time-major: T x channels)
# ---------------------------------------------------------------------

def conv1d(x, w, b, stride=1, padding=0):
    """1-D convolution. x: T x Cin, w: K x Cin x Cout, b: Cout."""
    if x.ndim != 2 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv1d", x.shape, w.shape)
    T = x.shape[0]
    K, _, cout = w.shape
    xp = np.pad(x.data, ((padding, padding), (0, 0)))
    t_out = (T + 2 * padding - K) // stride + 1
    if t_out < 1:
        raise ShapeError("conv1d", x.shape, w.shape)
    data = np.tile(b.data, (t_out, 1))
    for k in range(K):
        seg = xp[k : k + (t_out - 1) * stride + 1 : stride]
        data = data + seg @ w.data[k]

    def backward(g):
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))
        if w.requires_grad:
            gw = np.stack([
                xp[k : k + (t_out - 1) * stride + 1 : stride].T @ g for k in range(K)
            ])
            w.accumulate_grad(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[k : k + (t_out - 1) * stride + 1 : stride] += g @ w.data[k].T
            x.accumulate_grad(gxp[padding : padding + T])

    return _make(data, (x, w, b), backward)


def depthwise_conv1d(x, w, b):
    """Per-channel 1-D convolution with same-length zero padding.

    x: T x C, w: K x C (K odd), b: C.
    """
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError("depthwise_conv1d", x.shape, w.shape)
    K = w.shape[0]
    if K % 2 == 0:
        raise ShapeError("depthwise_conv1d", x.shape, w.shape)
    pad = (K - 1) // 2
    T = x.shape[0]
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    data = np.tile(b.data, (T, 1))
    for k in range(K):
        data = data + xp[k : k + T] * w.data[k]

    def backward(g):
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))
        if w.requires_grad:
            gw = np.stack([(xp[k : k + T] * g).sum(axis=0) for k in range(K)])
            w.accumulate_grad(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[k : k + T] += g * w.data[k]
            x.accumulate_grad(gxp[pad : pad + T])

    return _make(data, (x, w, b), backward)


# ---------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------

def grad_check(fn, params, h=1e-5, rel_floor=1e-6):
    """Compare analytic gradients of a scalar-valued graph with central differences.

    ``fn`` rebuilds and returns the scalar loss tensor from the current
    parameter values. Requires the float64 mode. Returns a dict with the
    max relative error and a per-parameter breakdown.
    """
    if default_dtype() is not np.float64:
        raise NumericsError("grad_check requires the float64 mode")
    for p in params:
        p.zero_grad()
    with GradTape() as tape:
        loss = fn()
        if loss.size != 1:
            raise NumericsError("grad_check: fn must return a scalar")
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report = {"max_rel_err": 0.0, "per_param": {}}
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gn = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            dn = fn().item()
            flat[i] = orig
            gn[i] = (up - dn) / (2 * h)
        gn = gn.reshape(p.data.shape)
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), rel_floor)
        rel = float(np.max(np.abs(ga - gn) / denom)) if ga.size else 0.0
        name = getattr(p, "name", f"param{id(p)}")
        report["per_param"][name] = rel
        report["max_rel_err"] = max(report["max_rel_err"], rel)
    return report
