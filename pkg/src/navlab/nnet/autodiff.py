"""Reverse-mode autodiff over f64 numpy arrays.

Eager tape: every op returns a Node holding its value and a closure that
scatters the incoming gradient to its parents. Ops accept arbitrary leading
batch dimensions; weights are plain 2-D matrices. Any non-finite value
produced by an op raises NumericError naming the node.
"""

from __future__ import annotations

import numpy as np


class NumericError(Exception):
    pass


class Node:
    __slots__ = ("val", "parents", "_backward", "grad", "name")

    def __init__(self, val, parents=(), backward=None, name="node"):
        self.val = np.asarray(val, dtype=np.float64)
        if not np.all(np.isfinite(self.val)):
            raise NumericError(f"non-finite value produced at node '{name}'")
        self.parents = tuple(parents)
        self._backward = backward
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.val.shape

    def backward(self):
        if self.val.size != 1:
            raise ValueError("backward() needs a scalar loss node")
        topo, seen = [], set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node.parents:
                visit(p)
            topo.append(node)

        visit(self)
        for node in topo:
            node.grad = np.zeros_like(node.val)
        self.grad = np.ones_like(self.val)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)


def as_node(x, name="const") -> Node:
    return x if isinstance(x, Node) else Node(x, name=name)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to a broadcast operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b, name="add"):
    a, b = as_node(a), as_node(b)
    out = Node(a.val + b.val, (a, b), name=name)

    def bwd(g):
        a.grad += _unbroadcast(g, a.val.shape)
        b.grad += _unbroadcast(g, b.val.shape)
    out._backward = bwd
    return out


def sub(a, b, name="sub"):
    a, b = as_node(a), as_node(b)
    out = Node(a.val - b.val, (a, b), name=name)

    def bwd(g):
        a.grad += _unbroadcast(g, a.val.shape)
        b.grad -= _unbroadcast(g, b.val.shape)
    out._backward = bwd
    return out


def mul(a, b, name="mul"):
    a, b = as_node(a), as_node(b)
    out = Node(a.val * b.val, (a, b), name=name)

    def bwd(g):
        a.grad += _unbroadcast(g * b.val, a.val.shape)
        b.grad += _unbroadcast(g * a.val, b.val.shape)
    out._backward = bwd
    return out


def scale(a, c: float, name="scale"):
    a = as_node(a)
    out = Node(a.val * c, (a,), name=name)

    def bwd(g):
        a.grad += g * c
    out._backward = bwd
    return out


def matmul(a, b, name="matmul"):
    a, b = as_node(a), as_node(b)
    out = Node(a.val @ b.val, (a, b), name=name)

    def bwd(g):
        a.grad += _unbroadcast(g @ np.swapaxes(b.val, -1, -2), a.val.shape)
        b.grad += _unbroadcast(np.swapaxes(a.val, -1, -2) @ g, b.val.shape)
    out._backward = bwd
    return out


def transpose_last2(a, name="transpose"):
    a = as_node(a)
    out = Node(np.swapaxes(a.val, -1, -2), (a,), name=name)

    def bwd(g):
        a.grad += np.swapaxes(g, -1, -2)
    out._backward = bwd
    return out


def reshape(a, shape, name="reshape"):
    a = as_node(a)
    out = Node(a.val.reshape(shape), (a,), name=name)

    def bwd(g):
        a.grad += g.reshape(a.val.shape)
    out._backward = bwd
    return out


def concat(nodes, axis=-1, name="concat"):
    nodes = [as_node(n) for n in nodes]
    out = Node(np.concatenate([n.val for n in nodes], axis=axis), nodes, name=name)
    sizes = [n.val.shape[axis] for n in nodes]

    def bwd(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for n, p in zip(nodes, pieces):
            n.grad += p
    out._backward = bwd
    return out


def tanh(a, name="tanh"):
    a = as_node(a)
    t = np.tanh(a.val)
    out = Node(t, (a,), name=name)

    def bwd(g):
        a.grad += g * (1.0 - t * t)
    out._backward = bwd
    return out


def relu(a, name="relu"):
    a = as_node(a)
    out = Node(np.maximum(a.val, 0.0), (a,), name=name)

    def bwd(g):
        a.grad += g * (a.val > 0)
    out._backward = bwd
    return out


def exp(a, name="exp"):
    a = as_node(a)
    e = np.exp(a.val)
    out = Node(e, (a,), name=name)

    def bwd(g):
        a.grad += g * e
    out._backward = bwd
    return out


def softplus(a, name="softplus"):
    a = as_node(a)
    x = a.val
    # Stable branches: ln(1+e^x) = x + ln(1+e^-x) for large x.
    val = np.where(x > 20.0, x, np.where(x < -20.0, np.exp(np.minimum(x, 0.0)),
                                         np.log1p(np.exp(np.clip(x, -20.0, 20.0)))))
    sig = 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))
    out = Node(val, (a,), name=name)

    def bwd(g):
        a.grad += g * sig
    out._backward = bwd
    return out


def softmax(a, axis=-1, name="softmax"):
    a = as_node(a)
    z = a.val - a.val.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Node(p, (a,), name=name)

    def bwd(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        a.grad += p * (g - dot)
    out._backward = bwd
    return out


def log_softmax(a, axis=-1, name="log_softmax"):
    a = as_node(a)
    z = a.val - a.val.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    ls = z - lse
    out = Node(ls, (a,), name=name)
    p = np.exp(ls)

    def bwd(g):
        a.grad += g - p * g.sum(axis=axis, keepdims=True)
    out._backward = bwd
    return out


def sum_(a, axis=None, name="sum"):
    a = as_node(a)
    out = Node(a.val.sum(axis=axis), (a,), name=name)

    def bwd(g):
        if axis is None:
            a.grad += np.broadcast_to(g, a.val.shape)
        else:
            a.grad += np.broadcast_to(np.expand_dims(g, axis), a.val.shape)
    out._backward = bwd
    return out


def mean(a, axis=None, name="mean"):
    a = as_node(a)
    n = a.val.size if axis is None else a.val.shape[axis]
    return scale(sum_(a, axis=axis, name=name), 1.0 / n, name=name + "_div")


def square(a, name="square"):
    return mul(a, a, name=name)


def gather_rows(table, idx, name="gather"):
    """Embedding lookup: out[...] = table[idx[...], :] for an int index array."""
    table = as_node(table)
    idx = np.asarray(idx, dtype=np.int64)
    out = Node(table.val[idx], (table,), name=name)

    def bwd(g):
        np.add.at(table.grad, idx, g)
    out._backward = bwd
    return out


def take(a, index_tuple, name="take"):
    """Fancy-indexed selection with fixed integer index arrays."""
    a = as_node(a)
    out = Node(a.val[index_tuple], (a,), name=name)

    def bwd(g):
        np.add.at(a.grad, index_tuple, g)
    out._backward = bwd
    return out


def affine(x, w, b, name="affine"):
    """x @ w + b with x (..., n), w (n, m), b (m,)."""
    return add(matmul(x, w, name=name + "_mm"), b, name=name + "_bias")


def attention(q, k, v, name="attn"):
    """Scaled dot-product attention; q (..., n_q, d), k (..., n_k, d),
    v (..., n_k, d_v)."""
    d = q.val.shape[-1]
    scores = scale(matmul(q, transpose_last2(k, name=name + "_kt"),
                          name=name + "_qk"), 1.0 / np.sqrt(d), name=name + "_scale")
    return matmul(softmax(scores, name=name + "_softmax"), v, name=name + "_av")


def cross_attention(q, k, v, wq, wk, wv, name="xattn"):
    """Single-head cross-attention with learned input projections."""
    return attention(matmul(q, wq, name=name + "_q"),
                     matmul(k, wk, name=name + "_k"),
                     matmul(v, wv, name=name + "_v"), name=name)
