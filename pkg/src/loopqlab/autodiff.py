"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Node` wraps a float64 array together with the rule that maps an
upstream gradient onto its parents. Graphs are built define-by-run and thrown
away after each backward pass.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class NumericError(ArithmeticError):
    """Raised when an operation produces NaN/Inf or divides by zero."""


class ShapeError(ValueError):
    """Raised on incompatible operand shapes."""


class ContractError(RuntimeError):
    """Raised when a caller violates an operation precondition."""


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    return arr


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.isfinite(value).all():
        raise NumericError(f"non-finite value produced by {op}")


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """A value in the computation graph.

    ``grad`` is materialized lazily by :meth:`backward` and accumulates across
    repeated backward calls until :meth:`zero_grad` is invoked.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: Sequence["Node"] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        name: str | None = None,
        check: bool = True,
    ):
        value = _as_array(value)
        if check:
            _check_finite(value, name or "leaf")
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(()))

    def __repr__(self) -> str:
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Node":
        return Node(self.value, check=False)

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Node":
        return swapaxes(self, -1, -2)

    def backward(self) -> None:
        backward(self)


def tensor(value, requires_grad: bool = False, name: str | None = None) -> Node:
    return Node(np.array(value, dtype=DTYPE), requires_grad=requires_grad, name=name)


def lift(x) -> Node:
    return x if isinstance(x, Node) else Node(x, check=False)


def _make(value, parents: Iterable[Node], backward_fn, op: str) -> Node:
    parents = tuple(parents)
    req = any(p.requires_grad for p in parents)
    _check_finite(value, op)
    return Node(value, requires_grad=req, parents=parents if req else (),
                backward_fn=backward_fn if req else None, name=op, check=False)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Populate ``.grad`` of every ancestor of the scalar ``root``."""
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _toposort(root)
    upstream: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + pg
            else:
                upstream[key] = pg


def grad(root: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
    """Return d root / d wrt without leaving gradients on the leaves."""
    for w in wrt:
        w.zero_grad()
    backward(root)
    out = [np.zeros_like(w.value) if w.grad is None else w.grad for w in wrt]
    for w in wrt:
        w.zero_grad()
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Node:
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Node:
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def neg(a) -> Node:
    a = lift(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)),
                 "mul")


def div(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise NumericError("division by zero")
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (unbroadcast(g / bv, av.shape),
                            unbroadcast(-g * out / bv, bv.shape)),
                 "div")


def square(a) -> Node:
    a = lift(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def sqrt(a) -> Node:
    a = lift(a)
    if np.any(a.value < 0):
        raise NumericError("sqrt of negative value")
    out = np.sqrt(a.value)
    if a.requires_grad and np.any(out == 0):
        raise NumericError("sqrt gradient undefined at 0")
    return _make(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def exp(a) -> Node:
    a = lift(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Node:
    a = lift(a)
    if np.any(a.value <= 0):
        raise NumericError("log of non-positive value")
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def sigmoid(a) -> Node:
    a = lift(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a) -> Node:
    a = lift(a)
    av = a.value
    s = 0.5 * (1.0 + np.tanh(0.5 * av))
    return _make(av * s, (a,), lambda g: (g * (s + av * s * (1.0 - s)),), "silu")


def clip(a, lo: float, hi: float) -> Node:
    """Clamp to ``[lo, hi]``; gradient passes only inside the closed range."""
    a = lift(a)
    av = a.value
    mask = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a,), lambda g: (g * mask,), "clip")


def round_ste(a, lo: float | None = None, hi: float | None = None) -> Node:
    """Round half to even with a straight-through gradient.

    With ``lo``/``hi`` the result is also clamped and the gradient is zeroed
    outside the clamp range.
    """
    a = lift(a)
    out = np.rint(a.value)
    if lo is None and hi is None:
        return _make(out, (a,), lambda g: (g,), "round_ste")
    lo = -np.inf if lo is None else lo
    hi = np.inf if hi is None else hi
    mask = (out >= lo) & (out <= hi)
    return _make(np.clip(out, lo, hi), (a,), lambda g: (g * mask,), "round_ste")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 - mirrors numpy
    a = lift(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = lift(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Node:
    a = lift(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(a, i: int, j: int) -> Node:
    a = lift(a)
    return _make(np.swapaxes(a.value, i, j), (a,), lambda g: (np.swapaxes(g, i, j),),
                 "swapaxes")


def transpose(a, axes) -> Node:
    a = lift(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),),
                 "transpose")


def getitem(a, idx) -> Node:
    a = lift(a)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), bw, "getitem")


def take(a, indices, axis: int = -1) -> Node:
    a = lift(a)
    indices = np.asarray(indices)
    axis = axis % a.ndim
    shape = a.shape

    if axis != 0 and indices.ndim != 1:
        raise ShapeError("take: multi-dimensional indices only supported on axis 0")

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        if axis == 0:
            np.add.at(out, indices, g)
        else:
            np.add.at(np.moveaxis(out, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.value, indices, axis=axis), (a,), bw, "take")


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [lift(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([n.value for n in nodes], axis=axis), nodes, bw, "concat")


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [lift(n) for n in nodes]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([n.value for n in nodes], axis=axis), nodes, bw, "stack")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    if av.ndim < 1 or bv.ndim < 1 or av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {av.shape} x {bv.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _make(av @ bv, (a, b), bw, "matmul")


def inv(a) -> Node:
    """Matrix inverse; d(A^-1) = -A^-1 dA A^-1."""
    a = lift(a)
    try:
        out = np.linalg.inv(a.value)
    except np.linalg.LinAlgError as exc:
        raise NumericError("singular matrix") from exc
    out_t = np.swapaxes(out, -1, -2)
    return _make(out, (a,), lambda g: (-(out_t @ g @ out_t),), "inv")


def kron(a, b) -> Node:
    """Kronecker product of two 2-D nodes."""
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    (m, n), (p, q) = av.shape, bv.shape

    def bw(g):
        g4 = g.reshape(m, p, n, q)
        return np.einsum("ipjq,pq->ij", g4, bv), np.einsum("ipjq,ij->pq", g4, av)

    return _make(np.kron(av, bv), (a, b), bw, "kron")


def log_softmax(a, axis: int = -1) -> Node:
    a = lift(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def softmax(a, axis: int = -1) -> Node:
    a = lift(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def rms_norm(x, eps: float = 1e-6) -> Node:
    """x / sqrt(mean(x^2) + eps) along the last axis (no gain)."""
    x = lift(x)
    xv = x.value
    r = 1.0 / np.sqrt((xv * xv).mean(axis=-1, keepdims=True) + eps)
    out = xv * r
    d = xv.shape[-1]

    def bw(g):
        return (r * (g - out * (g * out).sum(axis=-1, keepdims=True) / d),)

    return _make(out, (x,), bw, "rms_norm")


# ---------------------------------------------------------------------------
# deterministic helpers
# ---------------------------------------------------------------------------

def random_orthogonal(d: int, seed: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix from a seeded QR decomposition."""
    if d < 1:
        raise ContractError("dimension must be >= 1")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d, d))
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray,
                      h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.array(x, dtype=DTYPE)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return out
