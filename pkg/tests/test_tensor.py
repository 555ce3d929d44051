import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advbench import tensor as T
from advbench.tensor import Graph, backward_grad, finite_difference_grad, forward_eval

from helpers import PRIMITIVES, gradcheck_primitive


def test_forward_examples():
    g = Graph(T.relu, ["x"])
    np.testing.assert_array_equal(forward_eval(g, {"x": [-1.0, 0.0, 2.0]}).data, [0, 0, 2])
    g = Graph(T.sigmoid, ["x"])
    assert forward_eval(g, {"x": [0.0]}).data[0] == 0.5
    g = Graph(T.matmul, ["a", "b"])
    out = forward_eval(g, {"a": [[1, 2], [3, 4]], "b": [[1, 0], [0, 1]]})
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_backward_examples():
    g = Graph(lambda x: T.mul(x, x), ["x"])
    forward_eval(g, {"x": [3.0]})
    assert backward_grad(g, np.ones(1))["x"].data[0] == pytest.approx(6.0)

    g = Graph(T.sigmoid, ["x"])
    forward_eval(g, {"x": [0.0]})
    assert backward_grad(g, np.ones(1))["x"].data[0] == pytest.approx(0.25)


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    w1, w2, w3 = rng.normal(size=(6, 8)), rng.normal(size=(8, 5)), rng.normal(size=(5, 3))

    def mlp(x):
        h = T.relu(T.matmul(x, T.Tensor(w1)))
        h = T.relu(T.matmul(h, T.Tensor(w2)))
        return T.sum(T.sigmoid(T.matmul(h, T.Tensor(w3))))

    while True:
        x = rng.uniform(-1, 1, size=(2, 6))
        pre1 = x @ w1
        pre2 = np.maximum(pre1, 0) @ w2
        if min(np.abs(pre1).min(), np.abs(pre2).min()) > 0.05:
            break
    g = Graph(mlp, ["x"])
    g.forward(x=x.astype(np.float32))
    analytic = g.backward()["x"].data
    with T.precision(np.float64):
        numeric = finite_difference_grad(lambda a: mlp(T.Tensor(a)), x, 1e-3)
    sel = np.abs(numeric) > 1e-4
    assert (np.abs(analytic - numeric)[sel] / np.abs(numeric)[sel]).max() < 1e-3


def test_finite_difference_examples():
    x = np.random.default_rng(0).normal(size=(3, 2))
    np.testing.assert_allclose(finite_difference_grad(lambda a: float(a.sum()), x, 1e-3), 1.0, atol=1e-6)
    assert finite_difference_grad(lambda a: float(a[0] ** 2), np.array([3.0]), 1e-3)[0] == pytest.approx(6.0, abs=1e-5)


def test_bce_with_logits_gradient_both_directions():
    rng = np.random.default_rng(3)
    z = rng.uniform(-2, 2, size=(1, 18))
    t = (rng.uniform(size=(1, 18)) < 0.3).astype(np.float64)

    def bce(z):
        return T.mean(T.sub(T.softplus(z), T.mul(T.Tensor(t), z)))

    g = Graph(bce, ["z"])
    g.forward(z=z.astype(np.float32))
    analytic = g.backward()["z"].data
    with T.precision(np.float64):
        numeric = finite_difference_grad(lambda a: bce(T.Tensor(a)), z, 1e-3)
    closed_form = (1 / (1 + np.exp(-z)) - t) / z.size
    np.testing.assert_allclose(analytic, numeric, rtol=1e-3)
    np.testing.assert_allclose(numeric, closed_form, rtol=1e-5)


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(20):
        assert gradcheck_primitive(name, rng) < 1e-3


def test_forward_is_deterministic():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(4, 2, 6, 6)).astype(np.float32)
    w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    g = Graph(lambda x, w: T.maxpool2x2(T.relu(T.conv2d(x, w))), ["x", "w"])
    a = g.forward(x=x, w=w).data.copy()
    b = g.forward(x=x, w=w).data
    assert a.tobytes() == b.tobytes()


def test_clamp_gradient_is_exactly_zero_outside():
    x = np.array([-3.0, -0.5, 0.2, 0.9, 4.0], dtype=np.float32)
    g = Graph(lambda x: T.sum(T.clamp(x, -1.0, 1.0)), ["x"])
    g.forward(x=x)
    grad = g.backward()["x"].data
    np.testing.assert_array_equal(grad, [0.0, 1.0, 1.0, 1.0, 0.0])


def test_relu_subgradient_at_zero_is_zero():
    g = Graph(lambda x: T.sum(T.relu(x)), ["x"])
    g.forward(x=np.zeros(3, dtype=np.float32))
    np.testing.assert_array_equal(g.backward()["x"].data, 0.0)


def test_maxpool_routes_ties_to_lowest_flat_index():
    x = np.ones((1, 1, 2, 2), dtype=np.float32)
    g = Graph(lambda x: T.sum(T.maxpool2x2(x)), ["x"])
    g.forward(x=x)
    np.testing.assert_array_equal(g.backward()["x"].data[0, 0], [[1, 0], [0, 0]])


def test_unmarked_leaves_get_no_gradient():
    g = Graph(lambda a, b: T.sum(T.mul(a, b)), ["a", "b"], grad_leaves=["a"])
    g.forward(a=[1.0, 2.0], b=[3.0, 4.0])
    grads = g.backward()
    assert set(grads) == {"a"}
    np.testing.assert_array_equal(grads["a"].data, [3.0, 4.0])


def test_shape_mismatch_names_the_primitive():
    g = Graph(lambda a, b: T.add(a, b), ["a", "b"])
    with pytest.raises(T.ShapeError, match="add"):
        g.forward(a=np.zeros((2, 3)), b=np.zeros((3, 2)))
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))
    with pytest.raises(T.ShapeError, match="conv2d"):
        T.conv2d(T.Tensor(np.zeros((1, 2, 5, 5))), T.Tensor(np.zeros((1, 3, 3, 3))))


def test_non_finite_input_rejected():
    with pytest.raises(T.NonFiniteError):
        Graph(T.relu, ["x"]).forward(x=[1.0, np.nan])


def test_non_finite_output_rejected():
    big = T.Tensor(np.full(2, 3e38, dtype=np.float32))
    with np.errstate(over="ignore"), pytest.raises(T.NonFiniteError, match="add"):
        T.add(big, big)


def test_backward_before_forward_fails():
    with pytest.raises(T.GraphError):
        Graph(T.relu, ["x"]).backward()


def test_seed_shape_mismatch_fails():
    g = Graph(T.relu, ["x"])
    g.forward(x=[1.0, 2.0])
    with pytest.raises(T.ShapeError):
        g.backward(np.ones(3))


def test_only_scalar_broadcasting():
    a = T.Tensor(np.ones((2, 2)))
    np.testing.assert_array_equal(T.mul(2.0, a).data, 2.0)
    np.testing.assert_array_equal(T.add(a, 1).data, 2.0)
    with pytest.raises(T.ShapeError):
        T.mul(a, T.Tensor(np.ones(2)))


def test_graph_nodes_are_topologically_ordered():
    g = Graph(lambda x, w: T.sum(T.relu(T.matmul(x, w))), ["x", "w"])
    g.forward(x=np.ones((2, 3)), w=np.ones((3, 4)))
    ops = [n.op for n in g.nodes]
    assert ops == ["matmul", "relu", "sum"]


def test_shared_subexpression_accumulates():
    # f(x) = x*x + x  -> 2x + 1
    g = Graph(lambda x: T.sum(T.add(T.mul(x, x), x)), ["x"])
    g.forward(x=[2.0, -1.0])
    np.testing.assert_allclose(g.backward()["x"].data, [5.0, -1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2, allow_nan=False), min_size=1, max_size=8))
def test_sigmoid_stays_in_unit_interval(values):
    out = T.sigmoid(T.Tensor(values)).data
    assert ((out >= 0) & (out <= 1)).all()
