"""Flat parameter storage and a minimal reverse-mode tape over numpy arrays."""
from __future__ import annotations

import numpy as np

from dvf import kernels


class ParameterStore:
    """All learnable values of one model in a single flat vector.

    Layers register named slices with :meth:`add`; ``values`` is reallocated
    on each registration, so register everything before training.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.values = np.zeros(0)
        self.slices = {}

    def add(self, name, shape, init="glorot"):
        if name in self.slices:
            raise KeyError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        size = int(np.prod(shape))
        if isinstance(init, np.ndarray):
            val = np.asarray(init, float).reshape(shape)
        elif init == "zeros":
            val = np.zeros(shape)
        elif init == "glorot":
            fan_in = shape[0]
            fan_out = shape[1] if len(shape) > 1 else 1
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            val = self.rng.uniform(-lim, lim, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        start = self.values.size
        self.values = np.concatenate([self.values, val.ravel()])
        self.slices[name] = (start, start + size, shape)
        return name

    def get(self, name):
        a, b, shape = self.slices[name]
        return self.values[a:b].reshape(shape)

    def names(self):
        return list(self.slices)

    def copy(self):
        out = ParameterStore(self.seed)
        out.values = self.values.copy()
        out.slices = dict(self.slices)
        return out

    def __len__(self):
        return self.values.size


class Var:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "grad", "tape", "parents", "backward_fn", "slot")
    __array_priority__ = 100

    def __init__(self, value, tape, parents=(), backward_fn=None, slot=None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.slot = slot

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Var) else -np.asarray(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


class Tape:
    """Records operations in creation order; :meth:`backward` walks them in reverse.

    Gradients of parameters obtained through :meth:`param` accumulate into
    :attr:`grad`, which is aligned with ``store.values``.
    """

    def __init__(self, store=None, record=True):
        self.store = store
        self.record = record
        self.nodes = []
        self.grad = np.zeros(len(store)) if store is not None else None
        self._params = {}

    def param(self, name):
        if name not in self._params:
            a, b, shape = self.store.slices[name]
            if not self.record:
                return Var(self.store.values[a:b].reshape(shape), None)
            v = Var(self.store.values[a:b].reshape(shape), self, slot=(a, b))
            self.nodes.append(v)
            self._params[name] = v
        return self._params[name]

    def const(self, value):
        return Var(np.asarray(value, dtype=float), None)

    def node(self, value, parents, backward_fn):
        v = Var(value, self, parents, backward_fn)
        self.nodes.append(v)
        return v

    def backward(self, out, seed=None):
        if seed is None:
            if out.value.size != 1:
                raise ValueError("non-scalar output needs an explicit seed")
            seed = np.ones_like(out.value)
        out.grad = np.asarray(seed, float) + (0.0 if out.grad is None else out.grad)
        for v in reversed(self.nodes):
            if v.grad is None:
                continue
            if v.backward_fn is not None:
                v.backward_fn(v.grad)
            elif v.slot is not None:
                a, b = v.slot
                self.grad[a:b] += v.grad.ravel()
        return self.grad


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return None


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _send(x, g):
    if isinstance(x, Var) and x.tape is not None:
        x.grad = g if x.grad is None else x.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _lift(value, parents, backward_fn):
    tape = _tape_of(*parents)
    if tape is None:
        return Var(value, None)
    return tape.node(value, parents, backward_fn)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    av, bv = _val(a), _val(b)

    def bw(g):
        _send(a, _unbroadcast(g, av.shape))
        _send(b, _unbroadcast(g, bv.shape))

    return _lift(av + bv, (a, b), bw)


def neg(a):
    return _lift(-_val(a), (a,), lambda g: _send(a, -g))


def mul(a, b):
    av, bv = _val(a), _val(b)

    def bw(g):
        _send(a, _unbroadcast(g * bv, av.shape))
        _send(b, _unbroadcast(g * av, bv.shape))

    return _lift(av * bv, (a, b), bw)


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv

    def bw(g):
        _send(a, _unbroadcast(g / bv, av.shape))
        _send(b, _unbroadcast(-g * out / bv, bv.shape))

    return _lift(out, (a, b), bw)


def matmul(a, b):
    av, bv = _val(a), _val(b)

    def bw(g):
        _send(a, g @ bv.T)
        _send(b, av.T @ g)

    return _lift(av @ bv, (a, b), bw)


def relu(a):
    av = _val(a)
    mask = av > 0
    return _lift(av * mask, (a,), lambda g: _send(a, g * mask))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * _val(a)))
    return _lift(out, (a,), lambda g: _send(a, g * out * (1.0 - out)))


def tanh(a):
    out = np.tanh(_val(a))
    return _lift(out, (a,), lambda g: _send(a, g * (1.0 - out * out)))


def exp(a):
    out = np.exp(_val(a))
    return _lift(out, (a,), lambda g: _send(a, g * out))


def log(a):
    av = _val(a)
    return _lift(np.log(av), (a,), lambda g: _send(a, g / av))


def softplus(a):
    av = _val(a)
    out = np.logaddexp(0.0, av)
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    return _lift(out, (a,), lambda g: _send(a, g * sig))


def log_sigmoid(a):
    """``log(sigmoid(a))`` without overflow."""
    return neg(softplus(neg(a)))


def clip(a, lo, hi):
    av = _val(a)
    inside = (av >= lo) & (av <= hi)
    return _lift(np.clip(av, lo, hi), (a,), lambda g: _send(a, g * inside))


def square(a):
    av = _val(a)
    return _lift(av * av, (a,), lambda g: _send(a, 2.0 * g * av))


def total(a):
    av = _val(a)
    return _lift(np.array(av.sum()), (a,), lambda g: _send(a, np.broadcast_to(g, av.shape).copy()))


def row_sum(a):
    av = _val(a)
    return _lift(av.sum(axis=1), (a,), lambda g: _send(a, np.repeat(g[:, None], av.shape[1], axis=1)))


def concat(xs, axis=1):
    vals = [_val(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, sizes, axis=axis)):
            _send(x, part)

    return _lift(np.concatenate(vals, axis=axis), tuple(xs), bw)


def take(a, idx):
    """Row gather ``a[idx]``; repeated rows accumulate their gradients."""
    av = _val(a)
    idx = np.asarray(idx)

    def bw(g):
        if idx.dtype == bool or idx.ndim == 0:
            full = np.zeros_like(av)
            full[idx] = g
        else:
            full = kernels.segment_sum(g.reshape(len(idx), -1), idx, av.shape[0]).reshape(av.shape)
        _send(a, full)

    return _lift(av[idx], (a,), bw)


def segment_sum(a, segments, n_segments):
    """Scatter-add rows of ``a`` into ``n_segments`` buckets."""
    av = _val(a)
    segments = np.asarray(segments, np.int64)
    out = kernels.segment_sum(av, segments, n_segments)
    return _lift(out, (a,), lambda g: _send(a, g[segments]))


def segment_mean(a, segments, n_segments):
    """Bucket means; empty buckets give zeros."""
    counts = np.bincount(np.asarray(segments, np.int64), minlength=n_segments).astype(float)
    scale = 1.0 / np.maximum(counts, 1.0)
    s = segment_sum(a, segments, n_segments)
    return mul(s, scale[:, None] if _val(a).ndim == 2 else scale)


def segment_log_softmax(logits, segments, n_segments):
    """Log-softmax of a flat logit vector within each segment."""
    lv = _val(logits)
    segments = np.asarray(segments, np.int64)
    mx = np.full(n_segments, -np.inf)
    np.maximum.at(mx, segments, lv)
    shifted = lv - mx[segments]
    z = np.bincount(segments, weights=np.exp(shifted), minlength=n_segments)
    out = shifted - np.log(z)[segments]
    p = np.exp(out)

    def bw(g):
        gs = np.bincount(segments, weights=g, minlength=n_segments)
        _send(logits, g - p * gs[segments])

    return _lift(out, (logits,), bw)


def csr_matvec(indptr, indices, data, x):
    """Sparse ``M @ x`` with constant ``M`` (row-compressed)."""
    xv = _val(x)
    out = kernels.csr_matmat(indptr, indices, data, xv)
    n_cols = xv.shape[0]

    def bw(g):
        rows = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
        g2 = g if g.ndim > 1 else g[:, None]
        back = kernels.segment_sum(data[:, None] * g2[rows], indices, n_cols)
        _send(x, back if g.ndim > 1 else back[:, 0])

    return _lift(out, (x,), bw)


def stop_gradient(a):
    return Var(np.array(_val(a), copy=True), None)


def scatter_rows(base, idx, rows):
    """Copy of ``base`` with ``base[idx]`` replaced by ``rows`` (``idx`` unique)."""
    bv, rv = _val(base), _val(rows)
    idx = np.asarray(idx, np.int64)
    out = bv.copy()
    out[idx] = rv

    def bw(g):
        gb = g.copy()
        gb[idx] = 0.0
        _send(base, gb)
        _send(rows, g[idx])

    return _lift(out, (base, rows), bw)
