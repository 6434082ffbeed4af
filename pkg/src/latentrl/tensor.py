"""Float64 arrays with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
Creation order doubles as the tape: ``backward`` walks the reachable nodes
in reverse creation order, so each node is visited exactly once after all
of its consumers.

Only a small primitive set lives here (matmul, elementwise arithmetic,
exp/log/tanh, softmax/log_softmax, reductions, indexing, concat, reshape,
transpose, layer norm). Everything else is composed from these.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_ids = itertools.count()

# Every op output is checked for NaN/Inf when set.
CHECK_FINITE = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._id = next(_ids)
        if CHECK_FINITE and not np.isfinite(data).all():
            raise NonFiniteError(f"{backward.__qualname__.split('.')[0]} produced non-finite values")
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @classmethod
    def wrap(cls, data: np.ndarray) -> "Tensor":
        """Constant tensor sharing ``data`` without a copy."""
        out = cls.__new__(cls)
        out.data, out.grad, out.requires_grad = data, None, False
        out._parents, out._backward, out._id = (), None, next(_ids)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # -- operators --------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a Tensor is not a primitive; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    # -- reverse pass -----------------------------------------------------------
    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad and p._id not in nodes)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from None

    def add_backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), add_backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from None

    def mul_backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(out, (a, b), mul_backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def neg_backward(g):
        return (-g,)

    return Tensor._from_op(-a.data, (a,), neg_backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def exp_backward(g):
        return (g * out,)

    return Tensor._from_op(out, (a,), exp_backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def log_backward(g):
        return (g / a.data,)

    return Tensor._from_op(out, (a,), log_backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def tanh_backward(g):
        return (g * (1.0 - out * out),)

    return Tensor._from_op(out, (a,), tanh_backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading (batch) axes.

    1-D operands follow numpy's promotion rules.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul needs at least 1-D operands, got {a.shape} and {b.shape}")
    A = a.data if a.ndim > 1 else a.data[None, :]
    B = b.data if b.ndim > 1 else b.data[:, None]
    if A.shape[-1] != B.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        C = A @ B
    except ValueError:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None

    out = C
    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0]

    def matmul_backward(g):
        G = g
        if b.ndim == 1:
            G = G[..., None]
        if a.ndim == 1:
            G = G[..., None, :]
        ga = _unbroadcast(G @ np.swapaxes(B, -1, -2), A.shape).reshape(a.shape)
        gb = _unbroadcast(np.swapaxes(A, -1, -2) @ G, B.shape).reshape(b.shape)
        return ga, gb

    return Tensor._from_op(np.ascontiguousarray(out), (a, b), matmul_backward)


# ---------------------------------------------------------------------------
# normalisers
# ---------------------------------------------------------------------------

def _check_axis(x: Tensor, axis: int) -> None:
    if x.ndim == 0 or x.shape[axis] < 1:
        raise DimensionError(f"normalising axis {axis} is empty for shape {x.shape}")


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis)
    out = log_softmax_np(x.data, axis)

    def log_softmax_backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), log_softmax_backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis)
    out = softmax_np(x.data, axis)

    def softmax_backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), softmax_backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def layer_norm_backward(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(out, (x, gamma, beta), layer_norm_backward)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def sum_backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (x,), sum_backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None

    def reshape_backward(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(out, (x,), reshape_backward)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def transpose_backward(g):
        return (np.transpose(g, inverse),)

    return Tensor._from_op(np.transpose(x.data, axes), (x,), transpose_backward)


def index(x, key) -> Tensor:
    """Basic or integer-array indexing, ``x[key]``; repeated indices accumulate."""
    x = as_tensor(x)
    out = np.array(x.data[key], dtype=np.float64)

    def index_backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return Tensor._from_op(out, (x,), index_backward)


def gather(x, idx, axis: int = -1) -> Tensor:
    """``np.take_along_axis``: pick entries of ``x`` at integer positions ``idx``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"gather index out of range for axis of length {n}")
    out = np.take_along_axis(x.data, idx, axis=axis)

    def gather_backward(g):
        full = np.zeros_like(x.data)
        # put_along_axis overwrites on duplicates, so accumulate explicitly.
        grid = list(np.indices(idx.shape, sparse=True))
        grid[axis] = idx
        np.add.at(full, tuple(grid), g)
        return (full,)

    return Tensor._from_op(out, (x,), gather_backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes {[t.shape for t in ts]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def concat_backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, ts, concat_backward)
