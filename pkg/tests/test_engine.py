"""计算图、可微运算与梯度校验"""

import numpy as np
import pytest

from npkit.core.exceptions import DomainError, EmptySetError, GraphError, NonFiniteError, ShapeError
from npkit.engine import functional as F
from npkit.engine.gradcheck import grad_check
from npkit.engine.graph import Graph
from npkit.engine.random import make_rng, standard_normal


@pytest.fixture
def rng():
    return make_rng(7)


class TestGraph:
    def test_backward_of_square_sum(self):
        graph = Graph(dtype=np.float64)
        x = graph.leaf(np.array([1.0, -2.0, 3.0]), "x")
        loss = F.sum(F.square(x))
        grads = graph.backward(loss)
        np.testing.assert_allclose(grads["x"], [2.0, -4.0, 6.0])

    def test_gradients_accumulate_over_reuse(self):
        graph = Graph(dtype=np.float64)
        x = graph.leaf(np.array(3.0), "x")
        loss = F.add(F.mul(x, x), x)      # x² + x
        assert graph.backward(loss)["x"] == pytest.approx(7.0)

    def test_unused_leaf_gets_zero_gradient(self):
        graph = Graph(dtype=np.float64)
        x = graph.leaf(np.ones(2), "x")
        graph.leaf(np.ones(3), "unused")
        grads = graph.backward(F.sum(x))
        np.testing.assert_array_equal(grads["unused"], np.zeros(3))

    def test_param_registers_once(self):
        graph = Graph()
        a = graph.param("w", np.ones(2))
        b = graph.param("w", np.zeros(2))
        assert a.node_id == b.node_id
        np.testing.assert_array_equal(b.value, np.ones(2, dtype=np.float32))

    def test_duplicate_leaf_rejected(self):
        graph = Graph()
        graph.leaf(np.ones(1), "x")
        with pytest.raises(GraphError):
            graph.leaf(np.ones(1), "x")

    def test_non_scalar_loss_rejected(self):
        graph = Graph()
        x = graph.leaf(np.ones(3), "x")
        with pytest.raises(GraphError):
            graph.backward(F.square(x))

    def test_no_grad_graph_cannot_backward(self):
        graph = Graph(requires_grad=False)
        x = graph.leaf(np.ones(3), "x")
        with pytest.raises(GraphError):
            graph.backward(F.sum(x))
        assert len(graph) == 0

    def test_mixing_graphs_rejected(self):
        a = Graph().leaf(np.ones(2), "a")
        b = Graph().leaf(np.ones(2), "b")
        with pytest.raises(GraphError):
            F.add(a, b)

    def test_tensor_operators_delegate(self):
        graph = Graph(dtype=np.float64)
        x = graph.leaf(np.array([2.0]), "x")
        y = (x * 3.0 - 1.0) / 2.0 + (-x)
        np.testing.assert_allclose(y.value, [0.5])


class TestOps:
    @pytest.mark.parametrize("kind,x,expected", [
        ("relu", -2.0, 0.0),
        ("relu", 1.5, 1.5),
        ("sigmoid", 0.0, 0.5),
        ("softplus", 0.0, np.log(2.0)),
        ("exp", 0.0, 1.0),
        ("log", 1.0, 0.0),
    ])
    def test_activation_by_name(self, kind, x, expected):
        graph = Graph(dtype=np.float64)
        assert F.activation(graph.constant(np.array([x])), kind).item() == pytest.approx(expected)

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            F.activation(Graph().constant(np.zeros(1)), "tanh")

    def test_log_of_nonpositive_is_domain_error(self):
        graph = Graph()
        with pytest.raises(DomainError):
            F.log(graph.constant(np.array([1.0, 0.0])))

    def test_division_by_zero_is_domain_error(self):
        graph = Graph()
        with pytest.raises(DomainError):
            F.div(graph.constant(np.ones(2)), np.array([1.0, 0.0]))

    def test_overflow_is_non_finite_error(self):
        graph = Graph(dtype=np.float64)
        with pytest.raises(NonFiniteError) as info:
            with np.errstate(over="ignore"):
                F.exp(graph.constant(np.array([1000.0])))
        assert info.value.op == "exp"

    def test_incompatible_shapes(self):
        graph = Graph()
        with pytest.raises(ShapeError):
            F.add(graph.constant(np.ones(3)), graph.constant(np.ones(4)))

    def test_softplus_is_stable(self):
        graph = Graph(dtype=np.float64)
        out = F.softplus(graph.constant(np.array([-800.0, 0.0, 800.0]))).value
        np.testing.assert_allclose(out, [0.0, np.log(2.0), 800.0], atol=1e-12)

    def test_logsumexp_matches_direct_sum(self, rng):
        graph = Graph(dtype=np.float64)
        x = rng.normal(size=(3, 5))
        out = F.logsumexp(graph.constant(x), axis=-1).value
        np.testing.assert_allclose(out, np.log(np.exp(x).sum(axis=-1)))

    def test_logsumexp_handles_large_values(self):
        graph = Graph(dtype=np.float64)
        out = F.logsumexp(graph.constant(np.array([1000.0, 1000.0]))).value
        assert out == pytest.approx(1000.0 + np.log(2.0))

    def test_pool_empty_set(self):
        graph = Graph()
        with pytest.raises(EmptySetError):
            F.pool(graph.constant(np.zeros((0, 4))), "max")

    def test_max_pool_gradient_goes_to_lowest_argmax(self):
        graph = Graph(dtype=np.float64)
        x = graph.leaf(np.array([[1.0, 5.0], [3.0, 5.0], [3.0, 0.0]]), "x")
        grads = graph.backward(F.sum(F.pool(x, "max")))
        np.testing.assert_array_equal(grads["x"], [[0, 1], [1, 0], [0, 0]])

    def test_broadcast_to_rejects_trailing_mismatch(self):
        graph = Graph()
        with pytest.raises(ShapeError):
            F.broadcast_to(graph.constant(np.ones(3)), (2, 4))

    def test_take_repeats_accumulate(self):
        graph = Graph(dtype=np.float64)
        x = graph.leaf(np.arange(6.0).reshape(3, 2), "x")
        grads = graph.backward(F.sum(F.take(x, [0, 0, 2])))
        np.testing.assert_array_equal(grads["x"], [[2, 2], [0, 0], [1, 1]])

    def test_affine_shape_checks(self):
        graph = Graph()
        W = graph.leaf(np.ones((3, 2)), "W")
        b = graph.leaf(np.ones(2), "b")
        with pytest.raises(ShapeError):
            F.affine(graph.constant(np.ones((4, 5))), W, b)


class TestGradCheck:
    """每个可微运算都与中心差分一致"""

    @pytest.mark.parametrize("name,fn", [
        ("add_broadcast", lambda g, t: F.sum(F.add(t["a"], t["b"]))),
        ("mul_broadcast", lambda g, t: F.sum(F.square(F.mul(t["a"], t["b"])))),
        ("div", lambda g, t: F.sum(F.div(t["a"], F.add(F.square(t["b"]), 1.0)))),
        ("sigmoid_softplus", lambda g, t: F.sum(F.mul(F.sigmoid(t["a"]), F.softplus(t["b"])))),
        ("exp_log", lambda g, t: F.sum(F.log(F.add(F.exp(t["a"]), 2.0)))),
        ("logsumexp", lambda g, t: F.sum(F.logsumexp(F.mul(t["a"], t["b"]), axis=-1))),
        ("mean_pool", lambda g, t: F.sum(F.square(F.pool(t["a"], "mean")))),
        ("max_pool", lambda g, t: F.sum(F.square(F.pool(t["a"], "max")))),
        ("concat_slice", lambda g, t: F.sum(F.square(F.slice_last(F.concat([t["a"], t["a"]], axis=-1), 2, 6)))),
        ("take_stack", lambda g, t: F.sum(F.square(F.stack([F.take(t["a"], [2, 0]), F.take(t["a"], [1, 1])])))),
        ("relu", lambda g, t: F.sum(F.square(F.relu(t["a"])))),
    ])
    def test_elementwise_ops(self, name, fn, rng):
        theta = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,))}
        assert grad_check(fn, theta) < 1e-6, name

    def test_affine_with_leading_axes(self, rng):
        theta = {"x": rng.normal(size=(2, 3, 4)), "W": rng.normal(size=(4, 5)), "b": rng.normal(size=(5,))}
        fn = lambda g, t: F.sum(F.square(F.affine(t["x"], t["W"], t["b"])))  # noqa: E731
        assert grad_check(fn, theta) < 1e-6

    def test_single_array_theta(self, rng):
        fn = lambda g, x: F.mean(F.square(F.sub(x, 1.0)))  # noqa: E731
        assert grad_check(fn, rng.normal(size=5)) < 1e-6

    def test_max_coords_subsamples(self, rng):
        fn = lambda g, x: F.sum(F.square(x))  # noqa: E731
        assert grad_check(fn, rng.normal(size=(20, 20)), max_coords=5) < 1e-6

    def test_detects_wrong_gradient(self):
        def broken(graph, x):
            # 前向是 x²，反向却给出 x
            return F.sum(graph.record("broken", (x,), x.value ** 2, lambda g: (g * x.value,)))
        assert grad_check(broken, np.array([1.0, 2.0, 3.0])) > 0.1


class TestRandom:
    def test_streams_are_reproducible(self):
        a = make_rng(3, 1, 2).standard_normal(5)
        b = make_rng(3, 1, 2).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_streams_are_distinct(self):
        a = make_rng(3, 1, 2).standard_normal(5)
        b = make_rng(3, 1, 3).standard_normal(5)
        assert not np.array_equal(a, b)

    def test_precision_does_not_change_draws(self):
        single = standard_normal(make_rng(0), (4,), dtype=np.float32)
        double = standard_normal(make_rng(0), (4,), dtype=np.float64)
        np.testing.assert_array_equal(single, double.astype(np.float32))
