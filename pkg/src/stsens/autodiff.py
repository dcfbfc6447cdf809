"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` records the operation that produced it together with a
closure that pushes the upstream gradient to its parents.  Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order.  Everything runs in float64.

Graph recording can be switched off with :func:`no_grad` for inference.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        # iterative DFS; recursion depth would blow up on long LSTM chains
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node.grad is None:
                continue
            if not np.all(np.isfinite(node.grad)):
                raise FloatingPointError(f"non-finite gradient flowing through '{node.op}'")
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, op=op)
    if needs:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (undo numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise arithmetic -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / b.data**2, b.shape))

    return _make(a.data / b.data, (a, b), bw, "div")


def square(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(2.0 * a.data * g)

    return _make(a.data * a.data, (a,), bw, "square")


def tabs(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(np.sign(a.data) * g)

    return _make(np.abs(a.data), (a,), bw, "abs")


# nonlinearities -------------------------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        a._accumulate(g * out * (1.0 - out))

    return _make(out, (a,), bw, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        a._accumulate(g * (1.0 - out * out))

    return _make(out, (a,), bw, "tanh")


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.data
    neg = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg)

    def bw(g):
        a._accumulate(g * np.where(x > 0, 1.0, neg + alpha))

    return _make(out, (a,), bw, "elu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out)

    return _make(out, (a,), bw, "exp")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), bw, "softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if a.requires_grad:
            gx = g * gamma.data
            n = x.shape[-1]
            dx = inv / n * (
                n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True)
            )
            a._accumulate(dx)

    return _make(out, (a, gamma, beta), bw, "layer_norm")


# linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            bd = b.data if b.ndim >= 2 else b.data[:, None]
            ga = g if b.ndim >= 2 else g[..., None]
            a._accumulate(_unbroadcast(ga @ np.swapaxes(bd, -1, -2), a.shape))
        if b.requires_grad:
            if a.ndim >= 2 and b.ndim == 2:
                # fold all leading axes into one GEMM
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                b._accumulate(a2.T @ g2)
            else:
                b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum without repeated indices inside one operand."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out = spec.split("->")
    sa, sb = ins.split(",")
    data = np.einsum(spec, a.data, b.data, optimize=True)

    def bw(g):
        if a.requires_grad:
            ga = np.einsum(f"{out},{sb}->{sa}", g, b.data, optimize=True)
            a._accumulate(ga)
        if b.requires_grad:
            gb = np.einsum(f"{out},{sa}->{sb}", g, a.data, optimize=True)
            b._accumulate(gb)

    return _make(data, (a, b), bw, "einsum")


# shape manipulation ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)

    def bw(g):
        if axes is None:
            a._accumulate(np.transpose(g))
        else:
            a._accumulate(np.transpose(g, np.argsort(axes)))

    return _make(out, (a,), bw, "transpose")


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(a.data[idx], (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(part)

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def expand_dims(a: Tensor, axis: int) -> Tensor:
    def bw(g):
        a._accumulate(np.squeeze(g, axis=axis))

    return _make(np.expand_dims(a.data, axis), (a,), bw, "expand_dims")


def broadcast_to(a: Tensor, shape) -> Tensor:
    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), bw, "broadcast_to")


# reductions -----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape) / n)

    return _make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bw, "mean")
