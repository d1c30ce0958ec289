"""Minimal reverse-mode automatic differentiation over numpy arrays.

All network math in this package (attention kernels, encoder layers, losses)
is written against the `Tensor` type defined here, so a single implementation
serves both inference and training.  Inference wraps arrays in `no_grad()`
mode, in which no tape is recorded and the op functions reduce to plain numpy
calls plus a constant-time dispatch.

The op set is deliberately small: matmul, broadcast arithmetic, elementwise
nonlinearities, row gather/scatter, column slicing, concatenation, reductions
and a fused layer norm.  Gradients for broadcast ops are reduced back to the
operand shape by `_unbroadcast`.

A thread-local operation counter can be enabled with `count_ops()`; it records
multiply counts and every allocated result shape, which is how the complexity
audit asserts that the linear-attention path never materializes an
N-by-M buffer.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class OpCounter:
    """Tally of multiplies and array allocations made by tensor ops."""

    def __init__(self):
        self.multiplies = 0
        self.allocations = []  # list of shape tuples

    def note_matmul(self, n, k, m):
        self.multiplies += n * k * m

    def note_elementwise_mul(self, size):
        self.multiplies += size

    def note_alloc(self, shape):
        self.allocations.append(tuple(shape))

    def max_allocation(self) -> int:
        return max((int(np.prod(s)) for s in self.allocations), default=0)

    def has_allocation(self, shape) -> bool:
        return tuple(shape) in self.allocations


def _counter() -> OpCounter | None:
    return getattr(_state, "op_counter", None)


@contextmanager
def count_ops():
    """Enable op counting inside the block; yields the counter."""
    prev = _counter()
    counter = OpCounter()
    _state.op_counter = counter
    try:
        yield counter
    finally:
        _state.op_counter = prev


def _note_alloc(arr):
    c = _counter()
    if c is not None and arr.ndim >= 1:
        c.note_alloc(arr.shape)


def _note_mul(size):
    c = _counter()
    if c is not None:
        c.note_elementwise_mul(size)


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad and _grad_enabled()
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Reverse-mode sweep from this node (typically a scalar loss)."""
        if grad is None:
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen or not t.requires_grad:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self._accumulate(grad)
        for t in reversed(topo):
            if t._backward is not None:
                t._backward(t.grad)

    # Operators defined after the op functions below.
    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(data, parents, backward):
    _note_alloc(data)
    need = _grad_enabled() and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=need, _parents=parents, _backward=backward if need else None)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data
    _note_mul(out_data.size)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data
    _note_mul(out_data.size)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def neg(a):
    a = as_tensor(a)

    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data
    c = _counter()
    if c is not None:
        n = a.data.shape[0] if a.data.ndim == 2 else 1
        k = a.data.shape[-1]
        m = b.data.shape[1] if b.data.ndim == 2 else 1
        c.note_matmul(n, k, m)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T if b.data.ndim == 2 else np.outer(g, b.data))
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), backward)


def transpose(a):
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g.T)

    return _make(a.data.T, (a,), backward)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def phi(a):
    """Positive feature map elu(x) + 1: x + 1 for x >= 0, exp(x) below."""
    a = as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, x + 1.0, np.exp(np.minimum(x, 0.0)))

    def backward(g):
        a._accumulate(g * np.where(x >= 0, 1.0, out_data))

    return _make(out_data, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def relu(a):
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        # subgradient 0 at the kink
        a._accumulate(g * (a.data > 0))

    return _make(out_data, (a,), backward)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def concat_cols(a, b):
    """Concatenate two 2-D tensors along axis 1."""
    a, b = as_tensor(a), as_tensor(b)
    na = a.data.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:, :na])
        if b.requires_grad:
            b._accumulate(g[:, na:])

    return _make(out_data, (a, b), backward)


def slice_cols(a, j0, j1):
    a = as_tensor(a)
    out_data = a.data[:, j0:j1].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, j0:j1] = g
        a._accumulate(full)

    return _make(out_data, (a,), backward)


def concat_cols_multi(parts):
    """n-way column concatenation (used to reassemble attention heads)."""
    parts = [as_tensor(p) for p in parts]
    widths = [p.data.shape[1] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for p, j0, j1 in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[:, j0:j1])

    return _make(out_data, tuple(parts), backward)


def gather_rows(a, idx):
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(out_data, (a,), backward)


def scatter_rows_sum(n_rows, idx_list, blocks):
    """Sum of row-scattered blocks into an (n_rows, C) tensor.

    Each `blocks[p]` lands on rows `idx_list[p]`; overlapping rows across
    blocks accumulate.  Indices within one block must be unique.
    """
    blocks = [as_tensor(b) for b in blocks]
    if not blocks:
        raise ValueError("scatter_rows_sum needs at least one block")
    cols = blocks[0].data.shape[1]
    out_data = np.zeros((n_rows, cols), dtype=blocks[0].data.dtype)
    for idx, b in zip(idx_list, blocks):
        out_data[np.asarray(idx, dtype=np.intp)] += b.data

    def backward(g):
        for idx, b in zip(idx_list, blocks):
            if b.requires_grad:
                b._accumulate(g[np.asarray(idx, dtype=np.intp)])

    return _make(out_data, tuple(blocks), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize each row to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    nf = x.data.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out_data = xn * gamma.data + beta.data
    _note_mul(out_data.size)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xn).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=0))
        if x.requires_grad:
            dxn = g * gamma.data
            term = nf * dxn - dxn.sum(axis=1, keepdims=True) - xn * (dxn * xn).sum(axis=1, keepdims=True)
            x._accumulate(inv / nf * term)

    return _make(out_data, (x, gamma, beta), backward)


def row_l2_normalize(x):
    """Divide each row by its Euclidean norm (rows must be nonzero)."""
    norms = sqrt(tsum(mul(x, x), axis=1, keepdims=True))
    return div(x, norms)


Tensor.__add__ = add
Tensor.__radd__ = add
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = mul
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
