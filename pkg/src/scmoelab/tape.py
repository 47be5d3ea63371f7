"""Small reverse-mode tape over numpy arrays.

The model forward is written once against the op functions below. Each op
accepts plain ndarrays, :class:`Tensor` nodes, or a mix:

* all-ndarray inputs take a fast path and return an ndarray (used by the
  finite-difference oracle, where no graph is wanted);
* any Tensor input produces a Tensor node recording the vector-Jacobian
  product needed for backward.

Discrete routing decisions (top-k masks, capacity drops) enter only as
constant boolean masks, so gradients flow through softmax weights and expert
outputs while treating index sets as constants.
"""

from __future__ import annotations

import numpy as np

from . import numkit


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad=False, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def backward(self):
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order = []
        seen = set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                if isinstance(p, Tensor):
                    visit(p)
            order.append(node)

        visit(self)
        grads = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None or node._vjp is None:
                if g is not None and node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not isinstance(parent, Tensor) or pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        # leaves reached with no vjp of their own
        for node in order:
            if node.requires_grad and node._vjp is None and node.grad is None:
                node.grad = np.zeros_like(node.value)


def val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _any_tensor(*xs):
    return any(isinstance(x, Tensor) for x in xs)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    av, bv = val(a), val(b)
    out = av + bv
    if not _any_tensor(a, b):
        return out
    return Tensor(out, parents=(a, b),
                  vjp=lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = val(a), val(b)
    out = av - bv
    if not _any_tensor(a, b):
        return out
    return Tensor(out, parents=(a, b),
                  vjp=lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = val(a), val(b)
    out = av * bv
    if not _any_tensor(a, b):
        return out
    return Tensor(out, parents=(a, b),
                  vjp=lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def mm(a, b):
    av, bv = val(a), val(b)
    out = av @ bv
    if not _any_tensor(a, b):
        return out
    return Tensor(out, parents=(a, b),
                  vjp=lambda g: (g @ bv.T, av.T @ g))


def transpose(a):
    av = val(a)
    if not _any_tensor(a):
        return av.T
    return Tensor(av.T, parents=(a,), vjp=lambda g: (g.T,))


def gelu(a):
    av = val(a)
    out = numkit.gelu(av)
    if not _any_tensor(a):
        return out
    return Tensor(out, parents=(a,), vjp=lambda g: (g * numkit.gelu_grad(av),))


def sigmoid(a):
    av = val(a)
    out = numkit.sigmoid(av)
    if not _any_tensor(a):
        return out
    return Tensor(out, parents=(a,), vjp=lambda g: (g * out * (1.0 - out),))


def softplus(a):
    av = val(a)
    out = numkit.softplus(av)
    if not _any_tensor(a):
        return out
    return Tensor(out, parents=(a,), vjp=lambda g: (g * numkit.sigmoid(av),))


def masked_row_softmax(a, mask: np.ndarray):
    """Softmax over the True entries of each row; False entries map to 0.

    `mask` is a constant: gradients flow only into unmasked logits.
    """
    av = val(a)
    masked = np.where(mask, av, numkit.NEG_INF)
    out = numkit.row_softmax(masked)
    if not _any_tensor(a):
        return out

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, parents=(a,), vjp=vjp)


def row_softmax(a):
    av = val(a)
    return masked_row_softmax(a, np.ones(av.shape, dtype=bool))


def sum_all(a):
    av = val(a)
    out = np.asarray(av.sum())
    if not _any_tensor(a):
        return out
    return Tensor(out, parents=(a,), vjp=lambda g: (np.broadcast_to(g, av.shape).copy(),))


def mean_all(a):
    av = val(a)
    out = np.asarray(av.mean())
    if not _any_tensor(a):
        return out
    n = av.size
    return Tensor(out, parents=(a,), vjp=lambda g: (np.broadcast_to(g / n, av.shape).copy(),))


def mean_rows(a):
    """Mean over axis 0, kept as a (1, N) row."""
    av = val(a)
    out = av.mean(axis=0, keepdims=True)
    if not _any_tensor(a):
        return out
    n = av.shape[0]
    return Tensor(out, parents=(a,), vjp=lambda g: (np.broadcast_to(g / n, av.shape).copy(),))


def square(a):
    return mul(a, a)


def scale(a, c: float):
    av = val(a)
    out = av * c
    if not _any_tensor(a):
        return out
    return Tensor(out, parents=(a,), vjp=lambda g: (g * c,))
