"""Reverse-mode primitives against central finite differences."""

import numpy as np
import pytest

from trigger_erasure.autograd import Node, gather_rows, mse, scale, scatter_rows, softmax

H = 1e-6


def numeric_grad(f, x):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + H
        up = f(x)
        x[i] = old - H
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * H)
    return g


def check(build, *arrays, rtol=1e-6):
    """``build`` maps leaf nodes to a scalar node; compare with finite differences."""
    leaves = [Node(a.copy()) for a in arrays]
    out = build(*leaves)
    out.backward()
    for k, a in enumerate(arrays):
        def f(x, k=k):
            vals = [Node(v.copy()) for v in arrays]
            vals[k] = Node(x)
            return float(build(*vals).value)

        np.testing.assert_allclose(leaves[k].grad, numeric_grad(f, a.copy()), rtol=rtol, atol=1e-8)


def _dot(node, w):
    """sum(node * w) as a scalar node."""
    prod = node * Node(w)
    flat = prod.value.sum()
    return Node(flat, (prod,), lambda g: prod._accumulate(np.full(prod.shape, g)))


@pytest.fixture
def gen():
    return np.random.default_rng(0)


def test_add_sub_mul_broadcast(gen):
    a, b = gen.normal(size=(3, 4)), gen.normal(size=(4,))
    w = gen.normal(size=(3, 4))
    check(lambda x, y: _dot((x + y) * x - y, w), a, b)


def test_matmul_batched(gen):
    a, b = gen.normal(size=(2, 3, 4)), gen.normal(size=(4, 5))
    w = gen.normal(size=(2, 3, 5))
    check(lambda x, y: _dot(x @ y, w), a, b)


def test_transpose_and_scale(gen):
    a = gen.normal(size=(2, 3, 4))
    w = gen.normal(size=(2, 4, 3))
    check(lambda x: _dot(scale(x.T, 0.7), w), a)


def test_softmax(gen):
    a = gen.normal(size=(2, 5))
    w = gen.normal(size=(2, 5))
    check(lambda x: _dot(softmax(x), w), a)
    np.testing.assert_allclose(softmax(Node(a)).value.sum(axis=-1), 1.0)


def test_gather_scatter(gen):
    rows = gen.normal(size=(2, 3, 4))
    fill = gen.normal(size=(4,))
    idx = np.array([[0, 2, 5], [1, 3, 4]])
    w = gen.normal(size=(2, 6, 4))
    check(lambda r, f: _dot(scatter_rows(r, idx, 6, f), w), rows, fill)
    src = gen.normal(size=(2, 6, 4))
    check(lambda s: _dot(gather_rows(s, idx), w[:, :3]), src)


def test_mse_value_and_grad(gen):
    p, t = gen.normal(size=(3, 4)), gen.normal(size=(3, 4))
    assert float(mse(Node(p), t).value) == pytest.approx(np.mean((p - t) ** 2))
    check(lambda x: mse(x, t), p)
    weight = (gen.random((3, 4)) > 0.5).astype(float)
    check(lambda x: mse(x, t, weight), p)


def test_shared_node_accumulates():
    x = Node(np.array(3.0))
    y = x * x + x
    y.backward()
    assert float(x.grad) == pytest.approx(7.0)
