import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dctev import tensorkit as tk
from dctev.tensorkit import Tensor

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def mats(rows=st.integers(1, 6), cols=st.integers(1, 6)):
    return st.tuples(rows, cols).flatmap(lambda s: arrays(np.float64, s, elements=finite))


class TestMatmul:
    def test_identity(self):
        out = tk.matmul(np.eye(2), [[3, 4], [5, 6]]).data
        np.testing.assert_array_equal(out, [[3, 4], [5, 6]])

    def test_forced_arithmetic(self):
        assert tk.matmul([[1, 2]], [[3], [4]]).data.tolist() == [[11]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(tk.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            tk.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(1)
        rep = tk.grad_check(tk.matmul_op, [rng.standard_normal((4, 3)), rng.standard_normal((3, 5))])
        assert rep.passed and rep.max_rel_error < 1e-6

    def test_gradcheck_3x3(self):
        rng = np.random.default_rng(2)
        rep = tk.grad_check(tk.matmul_op, [rng.standard_normal((3, 3)), rng.standard_normal((3, 3))], 1e-5, 1e-4)
        assert rep.passed

    def test_associativity(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, b, c = (rng.standard_normal((4, 4)) for _ in range(3))
            left = tk.matmul(tk.matmul(a, b), c).data
            right = tk.matmul(a, tk.matmul(b, c)).data
            np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-12)

    def test_broadcast_weight_gradient(self):
        rng = np.random.default_rng(4)
        rep = tk.grad_check(tk.matmul_op, [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2))])
        assert rep.passed


class TestSoftmax:
    def test_zero_row_uniform(self):
        np.testing.assert_allclose(tk.softmax_rows(np.zeros((1, 4))).data, [[0.25] * 4])

    def test_no_overflow(self):
        out = tk.softmax_rows([[1000.0, 0.0]]).data
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)

    def test_random_rows_sum_to_one(self):
        x = np.random.default_rng(5).standard_normal((3, 3))
        np.testing.assert_allclose(tk.softmax_rows(x).data.sum(axis=1), 1.0, atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(mats())
    def test_rows_are_distributions(self, x):
        out = tk.softmax_rows(x).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


class TestElementwise:
    def test_sigmoid_zero(self):
        assert tk.sigmoid([0.0]).data[0] == 0.5

    def test_sigmoid_derivative_at_zero(self):
        eps = 1e-6
        num = (tk.sigmoid([eps]).data[0] - tk.sigmoid([-eps]).data[0]) / (2 * eps)
        assert num == pytest.approx(0.25, abs=1e-6)
        x = Tensor([0.0], requires_grad=True)
        tk.sigmoid(x).sum().backward()
        assert x.grad[0] == 0.25

    def test_sigmoid_gradcheck(self):
        rep = tk.grad_check(tk.sigmoid_op, [np.random.default_rng(6).standard_normal(7).reshape(7)])
        assert rep.passed and rep.max_rel_error < 1e-6

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 20), elements=finite))
    def test_sigmoid_open_interval_relu_nonnegative(self, x):
        s = tk.sigmoid(x).data
        assert np.all((s > 0) & (s < 1))
        assert np.all(tk.relu(x).data >= 0)

    def test_relu_values(self):
        np.testing.assert_array_equal(tk.relu([-1.0, 0.0, 2.5]).data, [0.0, 0.0, 2.5])


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = tk.layer_norm(np.full((2, 5), 3.7), np.ones(5), np.zeros(5)).data
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_normalises_rows(self):
        x = np.random.default_rng(7).standard_normal((4, 6)) * 5 + 2
        out = tk.layer_norm(x, np.ones(6), np.zeros(6)).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=1), 1.0, rtol=1e-5)

    def test_requires_two_features(self):
        with pytest.raises(tk.DimensionError):
            tk.layer_norm(np.ones((3, 1)), np.ones(1), np.zeros(1))

    def test_gradcheck(self):
        rng = np.random.default_rng(8)
        rep = tk.grad_check(tk.layer_norm_op, [rng.standard_normal((3, 5)), rng.standard_normal(5), rng.standard_normal(5)],
                            kwargs={"eps": 1e-5})
        assert rep.passed


class TestBCE:
    def test_confident_correct_is_near_zero(self):
        assert tk.bce_loss([1 - 1e-12], [1], "sum").item() == pytest.approx(0.0, abs=1e-11)

    def test_half_half(self):
        assert tk.bce_loss([0.5, 0.5], [0, 1], "sum").item() == pytest.approx(2 * math.log(2), rel=1e-12)

    def test_clamps_at_extremes(self):
        loss = tk.bce_loss([0.0, 1.0], [1, 0], "sum").item()
        assert np.isfinite(loss) and loss == pytest.approx(-2 * math.log(1e-12), rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(tk.DimensionError):
            tk.bce_loss([0.5, 0.5], [1], "sum")

    def test_gradient_matches_analytic(self):
        rng = np.random.default_rng(9)
        p = rng.uniform(0.05, 0.95, 10)
        y = (rng.random(10) < 0.5).astype(float)
        t = Tensor(p, requires_grad=True)
        tk.bce_loss(t, y, "mean").backward()
        np.testing.assert_allclose(t.grad, (p - y) / (p * (1 - p)) / 10, rtol=1e-12)

    def test_gradcheck_random_batch(self):
        rng = np.random.default_rng(10)
        p = rng.uniform(0.05, 0.95, (4, 3))
        y = (rng.random((4, 3)) < 0.3).astype(float)
        for red in ("sum", "mean"):
            rep = tk.grad_check(tk.bce_op, [p], kwargs={"labels": y, "reduction": red})
            assert rep.passed and rep.max_rel_error < 1e-6

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 30), st.integers(0, 2**31))
    def test_sum_equals_count_times_mean(self, n, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(1e-6, 1 - 1e-6, n)
        y = (rng.random(n) < 0.5).astype(float)
        s = tk.bce_loss(p, y, "sum").item()
        m = tk.bce_loss(p, y, "mean").item()
        assert s == pytest.approx(n * m, rel=1e-12)


class TestGradCheck:
    def test_corrupted_backward_fails(self):
        class Doubled(tk.MatMul):
            def backward(self, g, out, a, b):
                ga, gb = super().backward(g, out, a, b)
                return 2 * ga, 2 * gb

        rng = np.random.default_rng(11)
        rep = tk.grad_check(Doubled(), [rng.standard_normal((3, 3)), rng.standard_normal((3, 3))])
        assert not rep.passed
        assert rep.max_rel_error == pytest.approx(0.5, rel=1e-3)

    def test_eps_range(self):
        with pytest.raises(ValueError):
            tk.grad_check(tk.relu_op, [np.ones(2)], eps=0.1)

    @pytest.mark.parametrize("op,kw", [
        (tk.softmax_op, {}), (tk.sigmoid_op, {}), (tk.relu_op, {}), (tk.transpose_op, {"axes": (1, 0)}),
    ])
    def test_backward_linear_in_upstream(self, op, kw):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((3, 4))
        out = op.forward(x, **kw)
        g1, g2 = rng.standard_normal(out.shape), rng.standard_normal(out.shape)
        lhs = op.backward(2.0 * g1 - 3.0 * g2, out, x, **kw)[0]
        rhs = 2.0 * op.backward(g1, out, x, **kw)[0] - 3.0 * op.backward(g2, out, x, **kw)[0]
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)
        assert lhs.shape == x.shape


class TestTape:
    def test_gradients_accumulate_over_fanout(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        w = np.array([[3.0], [4.0]])
        y = tk.matmul(x, w) + tk.matmul(x, w)
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, [[6.0, 8.0]])

    def test_non_scalar_backward_requires_gradient(self):
        with pytest.raises(tk.DimensionError):
            tk.relu(Tensor(np.ones(3), requires_grad=True)).backward()

    def test_constant_inputs_record_nothing(self):
        out = tk.relu(np.ones(3))
        assert out._grad_fn is None
