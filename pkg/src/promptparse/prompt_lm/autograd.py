"""A small reverse-mode differentiation engine over float64 numpy arrays.

Only the primitives the transformer needs are provided, several of them fused
(``linear``, ``layer_norm``, ``masked_softmax``, ``cross_entropy``) to keep the
Python overhead per training step low.  Each primitive registers its backward
rule in :data:`BACKWARD_RULES` under the op name, so a rule can be swapped out
when testing the gradient checker itself.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

DTYPE = np.float64

BACKWARD_RULES: Dict[str, Callable] = {}

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def backward_rule(name):
    def register(fn):
        BACKWARD_RULES[name] = fn
        return fn

    return register


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "ctx")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents: Sequence["Tensor"] = ()
        self.op: Optional[str] = None
        self.ctx = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            grad = np.ones_like(self.data)
        order: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
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
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.op is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            needs = tuple(p.requires_grad for p in node.parents)
            pgrads = BACKWARD_RULES[node.op](node.ctx, g, needs)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, op, parents, ctx) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.op = op
        out.ctx = ctx
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, "add", (a, b), (a.shape, b.shape))


@backward_rule("add")
def _add_backward(ctx, g, needs):
    sa, sb = ctx
    return (
        _unbroadcast(g, sa) if needs[0] else None,
        _unbroadcast(g, sb) if needs[1] else None,
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, "sub", (a, b), (a.shape, b.shape))


@backward_rule("sub")
def _sub_backward(ctx, g, needs):
    sa, sb = ctx
    return (
        _unbroadcast(g, sa) if needs[0] else None,
        _unbroadcast(-g, sb) if needs[1] else None,
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, "mul", (a, b), (a.data, b.data))


@backward_rule("mul")
def _mul_backward(ctx, g, needs):
    a, b = ctx
    return (
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, "scale", (a,), c)


@backward_rule("scale")
def _scale_backward(c, g, needs):
    return (g * c,)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation; smooth everywhere, which finite differences need."""
    x_t, x = x, x.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return _result(0.5 * x * (1.0 + t), "gelu", (x_t,), (x, x2, t))


@backward_rule("gelu")
def _gelu_backward(ctx, g, needs):
    x, x2, t = ctx
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)


def total(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), "sum", (x,), x.shape)


@backward_rule("sum")
def _sum_backward(shape, g, needs):
    return (np.broadcast_to(g, shape).copy(),)


# -- shape ops --------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), "reshape", (x,), x.shape)


@backward_rule("reshape")
def _reshape_backward(shape, g, needs):
    return (g.reshape(shape),)


def transpose(x: Tensor, axes) -> Tensor:
    return _result(x.data.transpose(axes), "transpose", (x,), axes)


@backward_rule("transpose")
def _transpose_backward(axes, g, needs):
    return (g.transpose(np.argsort(axes)),)


def broadcast(x: Tensor, shape) -> Tensor:
    return _result(np.broadcast_to(x.data, shape), "broadcast", (x,), x.shape)


@backward_rule("broadcast")
def _broadcast_backward(shape, g, needs):
    return (_unbroadcast(g, shape),)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    sizes = [x.shape[axis] for x in xs]
    return _result(np.concatenate([x.data for x in xs], axis=axis), "concat", xs, (sizes, axis))


@backward_rule("concat")
def _concat_backward(ctx, g, needs):
    sizes, axis = ctx
    splits = np.cumsum(sizes)[:-1]
    return tuple(p if n else None for p, n in zip(np.split(g, splits, axis=axis), needs))


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _result(a.data @ b.data, "matmul", (a, b), (a.data, b.data))


@backward_rule("matmul")
def _matmul_backward(ctx, g, needs):
    a, b = ctx
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
    if needs[1]:
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return ga, gb


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
        parents = (x, w, b)
    else:
        parents = (x, w)
    return _result(out, "linear", parents, (x.data, w.data))


@backward_rule("linear")
def _linear_backward(ctx, g, needs):
    x, w = ctx
    gx = g @ w.T if needs[0] else None
    gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if needs[1] else None
    if len(needs) == 3:
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if needs[2] else None
        return gx, gw, gb
    return gx, gw


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    return _result(weight.data[ids], "embedding", (weight,), (ids, weight.shape))


@backward_rule("embedding")
def _embedding_backward(ctx, g, needs):
    ids, shape = ctx
    gw = np.zeros(shape, dtype=DTYPE)
    np.add.at(gw, ids.reshape(-1), g.reshape(-1, shape[-1]))
    return (gw,)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return _result(xhat * gamma.data + beta.data, "layer_norm", (x, gamma, beta), (xhat, inv, gamma.data))


@backward_rule("layer_norm")
def _layer_norm_backward(ctx, g, needs):
    xhat, inv, gamma = ctx
    gx = ggamma = gbeta = None
    if needs[0]:
        gh = g * gamma
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    if needs[1]:
        ggamma = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    if needs[2]:
        gbeta = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return gx, ggamma, gbeta


def masked_softmax(x: Tensor, keep: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; positions where ``keep`` is False get weight 0."""
    z = x.data if keep is None else np.where(keep, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _result(y, "softmax", (x,), y)


@backward_rule("softmax")
def _softmax_backward(y, g, needs):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted mean negative log-likelihood of ``targets`` under ``logits``."""
    logp = log_softmax(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    denom = weights.sum()
    loss = -(picked * weights).sum() / denom
    return _result(np.asarray(loss), "cross_entropy", (logits,), (logp, targets, weights, denom))


@backward_rule("cross_entropy")
def _cross_entropy_backward(ctx, g, needs):
    logp, targets, weights, denom = ctx
    d = np.exp(logp)
    np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], axis=-1) - 1.0, axis=-1)
    return (d * (weights / denom)[..., None] * g,)
