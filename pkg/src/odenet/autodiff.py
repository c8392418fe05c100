"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array and remembers how it was produced; calling
:func:`backward` on a scalar result fills the ``grad`` slot of every tensor
that requires gradients and is reachable from that result.  Gradients are
computed by unrolling: nodes are processed in reverse creation order (which
is a valid topological order), so deeply nested graphs from long integrator
rollouts never hit recursion limits.

Only the operations needed by RK4-templated network training are provided,
with a few fused nodes (``linear``, ``silu``, ``axpy``, ``rk4_combine``,
``mask_mix``) to keep per-step Python overhead low.
"""

from __future__ import annotations

import heapq
import itertools
from contextlib import contextmanager

import numpy as np

_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (cheap inference rollouts)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    # keep numpy from absorbing Tensor operands into object arrays; binary
    # ops then fall back to the __r*__ methods below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    out.requires_grad = True
    out._parents = parents
    out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    # g may be handed over without copy; accumulation always rebinds, never
    # mutates in place, so sharing g with a sibling node is safe.
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _track(*tensors) -> bool:
    return _grad_enabled and any(
        isinstance(t, Tensor) and t.requires_grad for t in tensors
    )


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    av = a.data if at else np.asarray(a, dtype=np.float64)
    bv = b.data if bt else np.asarray(b, dtype=np.float64)
    out = av + bv
    if not _track(a, b):
        return Tensor(out)
    parents = []
    if at and a.requires_grad:
        parents.append(a)
    if bt and b.requires_grad:
        parents.append(b)

    def back(g):
        if at and a.requires_grad:
            _accum(a, _unbroadcast(g, av.shape))
        if bt and b.requires_grad:
            _accum(b, _unbroadcast(g, bv.shape))

    return _make(out, tuple(parents), back)


def sub(a, b) -> Tensor:
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    av = a.data if at else np.asarray(a, dtype=np.float64)
    bv = b.data if bt else np.asarray(b, dtype=np.float64)
    out = av - bv
    if not _track(a, b):
        return Tensor(out)
    parents = []
    if at and a.requires_grad:
        parents.append(a)
    if bt and b.requires_grad:
        parents.append(b)

    def back(g):
        if at and a.requires_grad:
            _accum(a, _unbroadcast(g, av.shape))
        if bt and b.requires_grad:
            _accum(b, _unbroadcast(-g, bv.shape))

    return _make(out, tuple(parents), back)


def mul(a, b) -> Tensor:
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    av = a.data if at else np.asarray(a, dtype=np.float64)
    bv = b.data if bt else np.asarray(b, dtype=np.float64)
    out = av * bv
    if not _track(a, b):
        return Tensor(out)
    parents = []
    if at and a.requires_grad:
        parents.append(a)
    if bt and b.requires_grad:
        parents.append(b)

    def back(g):
        if at and a.requires_grad:
            _accum(a, _unbroadcast(g * bv, av.shape))
        if bt and b.requires_grad:
            _accum(b, _unbroadcast(g * av, bv.shape))

    return _make(out, tuple(parents), back)


def div(a, b) -> Tensor:
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    av = a.data if at else np.asarray(a, dtype=np.float64)
    bv = b.data if bt else np.asarray(b, dtype=np.float64)
    out = av / bv
    if not _track(a, b):
        return Tensor(out)
    parents = []
    if at and a.requires_grad:
        parents.append(a)
    if bt and b.requires_grad:
        parents.append(b)

    def back(g):
        if at and a.requires_grad:
            _accum(a, _unbroadcast(g / bv, av.shape))
        if bt and b.requires_grad:
            _accum(b, _unbroadcast(-g * av / (bv * bv), bv.shape))

    return _make(out, tuple(parents), back)


# -- nonlinearities ----------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not _track(a):
        return Tensor(out)

    def back(g):
        _accum(a, g * out)

    return _make(out, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-a.data))
    if not _track(a):
        return Tensor(out)

    def back(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), back)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the activation used throughout the learned networks."""
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s
    if not _track(a):
        return Tensor(out)

    def back(g):
        _accum(a, g * (s * (1.0 + a.data * (1.0 - s))))

    return _make(out, (a,), back)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data
    if not _track(a, b):
        return Tensor(out)
    parents = tuple(t for t in (a, b) if t.requires_grad)

    def back(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(out, parents, back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine layer: x @ w + b."""
    out = x.data @ w.data + b.data
    if not _track(x, w, b):
        return Tensor(out)
    parents = tuple(t for t in (x, w, b) if t.requires_grad)

    def back(g):
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            _accum(w, x.data.T @ g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _make(out, parents, back)


# -- structural ops ----------------------------------------------------------


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if not _track(a):
        return Tensor(out)

    def back(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        _accum(a, ga)

    return _make(out, (a,), back)


def concat(tensors, axis: int = 1) -> Tensor:
    vals = [t.data for t in tensors]
    out = np.concatenate(vals, axis=axis)
    if not _track(*tensors):
        return Tensor(out)
    parents = tuple(t for t in tensors if t.requires_grad)
    sizes = [v.shape[axis] for v in vals]

    def back(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + n)
                _accum(t, g[tuple(idx)])
            offset += n

    return _make(out, parents, back)


def stack(tensors, axis: int = 1) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)
    if not _track(*tensors):
        return Tensor(out)
    parents = tuple(t for t in tensors if t.requires_grad)

    def back(g):
        slabs = np.moveaxis(g, axis, 0)
        for k, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, slabs[k])

    return _make(out, parents, back)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows by integer index; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]
    if not _track(a):
        return Tensor(out)

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _make(out, (a,), back)


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())
    if not _track(a):
        return Tensor(out)

    def back(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(out, (a,), back)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum() / n)
    if not _track(a):
        return Tensor(out)

    def back(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape))

    return _make(out, (a,), back)


# -- fused integrator helpers -------------------------------------------------


def axpy(x: Tensor, k: Tensor, alpha) -> Tensor:
    """x + alpha * k with constant alpha (scalar or per-row column)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    out = x.data + k.data * alpha
    if not _track(x, k):
        return Tensor(out)
    parents = tuple(t for t in (x, k) if t.requires_grad)

    def back(g):
        if x.requires_grad:
            _accum(x, g)
        if k.requires_grad:
            _accum(k, g * alpha)

    return _make(out, parents, back)


def rk4_combine(x, k1, k2, k3, k4, dt) -> Tensor:
    """x + (dt/6) * (k1 + 2*k2 + 2*k3 + k4) with constant dt."""
    c = np.asarray(dt, dtype=np.float64) / 6.0
    out = x.data + c * (k1.data + 2.0 * (k2.data + k3.data) + k4.data)
    if not _track(x, k1, k2, k3, k4):
        return Tensor(out)
    parents = tuple(t for t in (x, k1, k2, k3, k4) if t.requires_grad)

    def back(g):
        if x.requires_grad:
            _accum(x, g)
        gc = g * c
        if k1.requires_grad:
            _accum(k1, gc)
        if k2.requires_grad:
            _accum(k2, 2.0 * gc)
        if k3.requires_grad:
            _accum(k3, 2.0 * gc)
        if k4.requires_grad:
            _accum(k4, gc)

    return _make(out, parents, back)


def mask_mix(state: Tensor, values, mask) -> Tensor:
    """state * (1 - mask) + values * mask with constant values/mask.

    Used for teacher forcing: observed channels are overwritten by data, so
    no gradient flows back through them.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    keep = 1.0 - mask
    out = state.data * keep + values * mask
    if not _track(state):
        return Tensor(out)

    def back(g):
        _accum(state, g * keep)

    return _make(out, (state,), back)


# -- backward -----------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every leaf that ``root`` depends on.

    Nodes are visited in reverse creation order via a max-heap on node ids,
    so each node is processed exactly once, after all of its consumers.
    Intermediate gradients are dropped as soon as they are consumed.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return
    root.grad = np.ones_like(root.data)
    heap = [-root._id]
    pending = {root._id: root}
    while heap:
        nid = -heapq.heappop(heap)
        node = pending.pop(nid)
        if node._backward is not None:
            node._backward(node.grad)
            node.grad = None
        for p in node._parents:
            if p.requires_grad and p._id not in pending:
                pending[p._id] = p
                heapq.heappush(heap, -p._id)
