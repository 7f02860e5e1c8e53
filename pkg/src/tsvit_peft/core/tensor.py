"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op records its parents and a closure mapping the output
gradient to one gradient per parent. ``Tensor.backward`` walks the recorded
graph in reverse topological order. Nodes that do not require a gradient are
never recorded, so fully frozen sub-graphs cost nothing on the way back.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

_CHECK_FINITE = True


class _Mode(threading.local):
    # per-thread so concurrent sweeps cannot toggle each other's grad mode
    grad_enabled = True
    dtype = np.float32


_mode = _Mode()

_GELU_C = math.sqrt(2.0 / math.pi)


class ContractViolation(ValueError):
    """Raised when an op is called outside its documented preconditions."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or inf from finite inputs."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev, _mode.grad_enabled = _mode.grad_enabled, False
    try:
        yield
    finally:
        _mode.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are cast to.

    Only the gradient-check oracle uses this (float64); training stays float32.
    """
    prev, _mode.dtype = _mode.dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _mode.dtype = prev


def set_finite_check(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


def default_dtype():
    return _mode.dtype


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _mode.dtype:
            arr = arr.astype(_mode.dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection --------------------------------------------------
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
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractViolation(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order over nodes that require grad (iterative DFS)."""
    visited: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    post.reverse()
    return post


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _CHECK_FINITE and data.dtype.kind == "f":
        if not np.isfinite(data.sum(dtype=np.float64)) and not np.isfinite(data).all():
            raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _mode.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        s = b
        return _make(a.data * a.data.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),), "scale")
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, sa) if a.requires_grad else None,
            _unbroadcast(g * ad, sb) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    x2 = x * x
    t = x2 * k
    t += 1.0
    t *= x
    t *= c
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def backward(g):
        d = t * t
        np.subtract(1.0, d, out=d)
        d *= c
        e = x2 * (3.0 * k)
        e += 1.0
        d *= e
        d *= x
        d *= 0.5
        d += 0.5
        d += 0.5 * t
        d *= g
        return (d,)

    return _make(out, (a,), backward, "gelu")


# -- reductions -----------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims), dtype=a.data.dtype)
    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# -- shape ops ------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g) if _fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), backward, "slice")


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),), "broadcast")


def take(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup ``table[indices]`` (embedding gather)."""
    indices = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, indices.reshape(-1), g.reshape(-1, *shape[1:]))
        return (full,)

    return _make(table.data[indices], (table,), backward, "take")


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    shared = bd.ndim == 2 and ad.ndim > 2
    if shared:
        # one GEMM over all leading dims
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*ad.shape[:-1], bd.shape[-1])
    else:
        out = ad @ bd

    def backward(g):
        ga = gb = None
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


# -- normalisation / probabilistic ----------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def layer_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then optionally scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    n = x.shape[-1]
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * weight.data if weight is not None else g
        gx = None
        if a.requires_grad:
            gx = rstd / n * (
                n * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        gw = (g * xhat).sum(axis=lead) if weight is not None and weight.requires_grad else None
        gb = g.sum(axis=lead) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (a, weight if weight is not None else Tensor(0.0), bias if bias is not None else Tensor(0.0))
    return _make(out.astype(x.dtype, copy=False), parents, backward, "layer_norm")


def cross_entropy(
    logits: Tensor, target: np.ndarray, axis: int = 1, class_weight: np.ndarray | None = None
) -> Tensor:
    """Mean (optionally class-weighted) negative log-likelihood over all positions.

    ``target`` holds integer class indices and has the shape of ``logits``
    with the class axis removed.
    """
    x = np.moveaxis(logits.data, axis, -1)
    k = x.shape[-1]
    flat = x.reshape(-1, k)
    tgt = np.asarray(target, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ContractViolation(f"target has {tgt.shape[0]} positions, logits have {flat.shape[0]}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= k):
        raise ContractViolation("target class index out of range")
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(flat.shape[0])
    w = np.ones(flat.shape[0], dtype=flat.dtype) if class_weight is None else np.asarray(class_weight, dtype=flat.dtype)[tgt]
    denom = w.sum()
    loss = -(w * logp[rows, tgt]).sum() / denom
    moved_shape = x.shape

    def backward(g):
        p = np.exp(logp)
        p[rows, tgt] -= 1.0
        p *= (w / denom)[:, None] * g
        return (np.moveaxis(p.reshape(moved_shape), -1, axis),)

    return _make(np.asarray(loss, dtype=flat.dtype), (logits,), backward, "cross_entropy")


def attention(qkv: Tensor, heads: int, prefix: Tensor | None = None) -> Tensor:
    """Fused multi-head scaled dot-product attention.

    ``qkv`` is (S, L, 3d) packed as [q | k | v]. ``prefix`` (S, P, 3d), when
    given, contributes P extra key/value positions; its query slice is unused.
    Returns (S, L, d).
    """
    S, L, d3 = qkv.shape
    d = d3 // 3
    dh = d // heads
    dtype = qkv.data.dtype
    scale = dtype.type(1.0 / math.sqrt(dh))

    def split(t):
        n = t.shape[1]
        r = t.data.reshape(S, n, 3, heads, dh)
        return (np.ascontiguousarray(r[:, :, i].transpose(0, 2, 1, 3)) for i in range(3))

    q, k, v = split(qkv)
    if prefix is not None:
        _, kp, vp = split(prefix)
        k = np.concatenate([k, kp], axis=2)
        v = np.concatenate([v, vp], axis=2)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    a = np.exp(scores)
    a /= a.sum(axis=-1, keepdims=True)
    o = a @ v
    out = np.ascontiguousarray(o.transpose(0, 2, 1, 3)).reshape(S, L, d)

    def pack(gq, gk, gv):
        n = gk.shape[2]
        g = np.empty((S, n, 3, heads, dh), dtype=dtype)
        g[:, :, 0] = 0 if gq is None else gq.transpose(0, 2, 1, 3)
        g[:, :, 1] = gk.transpose(0, 2, 1, 3)
        g[:, :, 2] = gv.transpose(0, 2, 1, 3)
        return g.reshape(S, n, 3 * d)

    def backward(g):
        go = g.reshape(S, L, heads, dh).transpose(0, 2, 1, 3)
        ga = go @ v.transpose(0, 1, 3, 2)
        gv = a.transpose(0, 1, 3, 2) @ go
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ k
        gk = gs.transpose(0, 1, 3, 2) @ q
        g_main = pack(gq, gk[:, :, :L], gv[:, :, :L])
        if prefix is None:
            return (g_main,)
        g_pre = pack(None, gk[:, :, L:], gv[:, :, L:]) if prefix.requires_grad else None
        return g_main, g_pre

    parents = (qkv,) if prefix is None else (qkv, prefix)
    return _make(out, parents, backward, "attention")
