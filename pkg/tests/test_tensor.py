import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from latentrl import tensor as T
from latentrl.errors import ContractError, DimensionError, NonFiniteError
from latentrl.tensor import Tensor

from conftest import central_diff, rel_err


def check_grad(build, *shapes, seed=0, tol=1e-5, positive=False):
    """Compare backward() with central differences for a scalar ``build(*tensors)``."""
    rng = np.random.default_rng(seed)
    arrs = [rng.normal(size=s) for s in shapes]
    if positive:
        arrs = [np.abs(a) + 0.5 for a in arrs]
    ts = [Tensor(a, requires_grad=True) for a in arrs]
    build(*ts).backward()
    for t, a in zip(ts, arrs):
        num = central_diff(lambda: float(build(*[Tensor(x) for x in arrs]).data), a)
        assert rel_err(t.grad, num) < tol


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2)) @ Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(a.data, [[1, 2], [3, 4]])

    def test_annihilating_product(self):
        a = Tensor([[1.0, 0.0], [0.0, 0.0]]) @ Tensor([[0.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(a.data, np.zeros((2, 2)))

    def test_gradient_3x4_4x2(self):
        w = np.random.default_rng(1).normal(size=(3, 2))
        check_grad(lambda a, b: T.sum((a @ b) * Tensor(w)), (3, 4), (4, 2), tol=1e-6)

    def test_batched_broadcast_gradient(self):
        check_grad(lambda a, b: T.sum(T.tanh(a @ b)), (2, 3, 4), (4, 5))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
            Tensor(np.ones((3, 4))) @ Tensor(np.ones((3, 2)))


class TestLogSoftmax:
    def test_uniform(self):
        out = T.log_softmax(Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, -math.log(4), atol=1e-15)

    def test_no_overflow(self):
        out = T.log_softmax(Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [0.0, -1000.0], atol=1e-12)

    def test_matches_scalar_evaluation(self):
        # Independent evaluation with math.fsum in pure Python.
        x = [1.0, 2.0, 3.0]
        lse = 3.0 + math.log(math.fsum(math.exp(v - 3.0) for v in x))
        expected = [v - lse for v in x]
        np.testing.assert_allclose(T.log_softmax(Tensor(x)).data, expected, atol=1e-12)
        np.testing.assert_allclose(expected, [-2.40760596444438, -1.40760596444438, -0.40760596444438],
                                   atol=1e-12)

    def test_empty_axis(self):
        with pytest.raises((DimensionError, ContractError)):
            T.log_softmax(Tensor(np.zeros((2, 0))))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
                  elements=st.floats(-1e3, 1e3)))
    def test_rows_normalised(self, x):
        out = T.log_softmax(Tensor(x))
        np.testing.assert_allclose(np.exp(out.data).sum(axis=-1), 1.0, atol=1e-12)

    def test_gradient(self):
        w = np.random.default_rng(5).normal(size=(3, 5))
        check_grad(lambda a: T.sum(T.log_softmax(a) * Tensor(w)), (3, 5))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
        T.sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_zero_times_x(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.sum(x * 0.0).backward()
        np.testing.assert_array_equal(x.grad, np.zeros((2, 3)))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(x * 2.0)

    def test_shared_subexpression_accumulates(self):
        x = Tensor([1.5, -2.0], requires_grad=True)
        y = x * x
        T.sum(y + y * x).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 3 * x.data ** 2)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(4)
            a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            T.sum(T.log_softmax(T.tanh(a @ b)) * a).backward()
            return a.grad.copy(), b.grad.copy()
        (a1, b1), (a2, b2) = run(), run()
        assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()

    def test_grad_shape_matches_data(self):
        a = Tensor(np.ones((2, 1, 3)), requires_grad=True)
        T.sum(a + Tensor(np.ones((4, 3)))).backward()
        assert a.grad.shape == a.data.shape
        np.testing.assert_array_equal(a.grad, np.full((2, 1, 3), 4.0))


class TestOpGradients:
    """Every differentiable op against central differences (f64, h = 1e-5)."""

    def test_add_mul_broadcast(self):
        check_grad(lambda a, b: T.sum(T.tanh(a * b + b)), (3, 4), (4,))

    def test_exp(self):
        check_grad(lambda a: T.sum(T.exp(a) * a), (2, 3))

    def test_log(self):
        check_grad(lambda a: T.sum(T.log(a) * a), (2, 3), positive=True)

    def test_tanh(self):
        check_grad(lambda a: T.sum(T.tanh(a) * T.tanh(a)), (5,))

    def test_softmax(self):
        w = np.random.default_rng(7).normal(size=(2, 6))
        check_grad(lambda a: T.sum(T.softmax(a) * Tensor(w)), (2, 6))

    def test_layer_norm(self):
        w = np.random.default_rng(8).normal(size=(3, 5))
        check_grad(lambda x, g, b: T.sum(T.layer_norm(x, g, b) * Tensor(w)), (3, 5), (5,), (5,))

    def test_mean_axis(self):
        check_grad(lambda a: T.sum(T.tanh(T.mean(a, axis=0))), (4, 3))

    def test_reshape_transpose(self):
        w = np.random.default_rng(9).normal(size=(3, 2))
        check_grad(lambda a: T.sum(T.reshape(a, (2, 3)).transpose() * Tensor(w)), (6,))

    def test_index(self):
        check_grad(lambda a: T.sum(T.tanh(a[np.array([0, 2, 0])])), (3, 4))

    def test_gather(self):
        idx = np.array([[1], [0], [1]])
        check_grad(lambda a: T.sum(T.tanh(T.gather(a, idx, axis=1))), (3, 2))

    def test_concat(self):
        check_grad(lambda a, b: T.sum(T.tanh(T.concat([a, b], axis=0))), (2, 3), (1, 3))

    def test_sub_and_div(self):
        check_grad(lambda a, b: T.sum(T.tanh((a - b) / 3.0)), (4,), (4,))


class TestFiniteness:
    def test_log_of_zero_raises(self):
        with pytest.raises(NonFiniteError):
            T.log(Tensor([0.0, 1.0]))

    def test_product_of_shape_is_size(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.size == 24 == t.data.size
