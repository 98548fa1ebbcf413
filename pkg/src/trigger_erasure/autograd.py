"""A tiny reverse-mode differentiation tape over numpy arrays.

Only the operations the reconstruction network needs are provided: batched
matmul, broadcasting add/sub/mul, row softmax, row gather/scatter and the
mean squared error.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def __add__(self, other):
        other = as_node(other)

        def back(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        return Node(self.value + other.value, (self, other), back)

    def __sub__(self, other):
        other = as_node(other)

        def back(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(-g, other.shape))

        return Node(self.value - other.value, (self, other), back)

    def __mul__(self, other):
        other = as_node(other)

        def back(g):
            self._accumulate(_unbroadcast(g * other.value, self.shape))
            other._accumulate(_unbroadcast(g * self.value, other.shape))

        return Node(self.value * other.value, (self, other), back)

    def __matmul__(self, other):
        other = as_node(other)

        def back(g):
            a, b = self.value, other.value
            self._accumulate(_unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape))
            other._accumulate(_unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape))

        return Node(self.value @ other.value, (self, other), back)

    @property
    def T(self):
        def back(g):
            self._accumulate(np.swapaxes(g, -1, -2))

        return Node(np.swapaxes(self.value, -1, -2), (self,), back)

    def backward(self) -> None:
        order, seen = [], set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node.parents:
                visit(p)
            order.append(node)

        visit(self)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def scale(x: Node, c: float) -> Node:
    return Node(x.value * c, (x,), lambda g: x._accumulate(g * c))


def softmax(x: Node) -> Node:
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        x._accumulate(y * (g - np.sum(g * y, axis=-1, keepdims=True)))

    return Node(y, (x,), back)


def gather_rows(x: Node, idx: np.ndarray) -> Node:
    """``x[b, idx[b, i], :]`` for a (B, n, d) node and (B, k) indices."""
    idx3 = idx[:, :, None]
    out = np.take_along_axis(x.value, idx3, axis=1)

    def back(g):
        full = np.zeros_like(x.value)
        np.put_along_axis(full, idx3, g, axis=1)
        x._accumulate(full)

    return Node(out, (x,), back)


def scatter_rows(rows: Node, idx: np.ndarray, n: int, fill: Node) -> Node:
    """(B, n, d) tensor holding ``rows`` at ``idx`` and the vector ``fill`` elsewhere."""
    b, _, d = rows.shape
    placed = np.zeros((b, n, 1), dtype=bool)
    np.put_along_axis(placed, idx[:, :, None], True, axis=1)
    out = np.broadcast_to(fill.value, (b, n, d)).copy()
    np.put_along_axis(out, idx[:, :, None], rows.value, axis=1)

    def back(g):
        rows._accumulate(np.take_along_axis(g, idx[:, :, None], axis=1))
        fill._accumulate(np.sum(np.where(placed, 0.0, g), axis=(0, 1)).reshape(fill.shape))

    return Node(out, (rows, fill), back)


def concat_rows(a: Node, b: Node) -> Node:
    """Concatenate two (B, n, d) nodes along the token axis."""
    k = a.shape[1]

    def back(g):
        a._accumulate(g[:, :k])
        b._accumulate(g[:, k:])

    return Node(np.concatenate([a.value, b.value], axis=1), (a, b), back)


def drop_first_row(x: Node) -> Node:
    def back(g):
        full = np.zeros_like(x.value)
        full[:, 1:] = g
        x._accumulate(full)

    return Node(x.value[:, 1:], (x,), back)


def mse(pred: Node, target: np.ndarray, weight: np.ndarray | None = None) -> Node:
    """Mean of squared error; with ``weight`` the mean runs over weighted pixels."""
    diff = pred.value - target
    if weight is None:
        weight = np.ones_like(diff)
    denom = float(weight.sum()) or 1.0
    loss = float(np.sum(weight * diff * diff) / denom)
    return Node(loss, (pred,), lambda g: pred._accumulate(g * 2.0 * weight * diff / denom))
