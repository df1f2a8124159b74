import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from msi.errors import GradCheckError, ShapeError, StateError
from msi.numerics import (
    LinearLayer,
    cosine_similarity,
    cross_entropy,
    finite_difference_check,
    l2_normalize_rows,
    layer_norm,
    layer_norm_backward,
    matmul,
    mean_pool_rows,
    softmax,
    softmax_cross_entropy,
)

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def naive_matmul(a, b):
    out = [[0.0] * len(b[0]) for _ in a]
    for i in range(len(a)):
        for j in range(len(b[0])):
            for k in range(len(b)):
                out[i][j] += a[i][k] * b[k][j]
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.5, -2.0], [0.25, 3.0]])
        assert np.array_equal(matmul(np.eye(2), a), a)

    def test_hand_arithmetic(self):
        assert matmul([[1, 2], [3, 4]], [[1], [1]]).tolist() == [[3.0], [7.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a.tolist(), b.tolist()), rtol=1e-12, atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"2x3.*2x3"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    @pytest.mark.parametrize("seed", range(10))
    def test_associativity(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
        left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        assert np.max(np.abs(left - right)) <= 1e-9 * max(1.0, np.max(np.abs(left)))


class TestNormalize:
    def test_345(self):
        np.testing.assert_allclose(l2_normalize_rows([[3.0, 4.0]]), [[0.6, 0.8]], atol=1e-15)

    def test_zero_row_unchanged(self):
        assert np.array_equal(l2_normalize_rows(np.zeros((1, 3)), 1e-12), np.zeros((1, 3)))

    def test_unit_row_fixed(self):
        r = np.array([[0.6, 0.8]])
        np.testing.assert_allclose(l2_normalize_rows(r), r, atol=1e-12)

    @given(arrays(np.float64, (4, 3), elements=finite))
    def test_idempotent_and_norms(self, m):
        once = l2_normalize_rows(m)
        np.testing.assert_allclose(l2_normalize_rows(once), once, atol=1e-12)
        for n in np.linalg.norm(once, axis=1):
            assert n == 0.0 or abs(n - 1.0) <= 1e-12 or n < 1e-12


class TestCosine:
    def test_self(self):
        assert cosine_similarity([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_opposite(self):
        assert cosine_similarity([1.0, -2.0], [-1.0, 2.0]) == pytest.approx(-1.0, abs=1e-15)

    def test_zero_vectors(self):
        assert cosine_similarity([0.0, 0.0], [0.0, 0.0]) == 0.0

    @given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
    def test_bounded(self, x, y):
        assert -1.0 <= cosine_similarity(x, y) <= 1.0


class TestLayerNorm:
    def test_constant_vector(self):
        assert np.array_equal(layer_norm(np.full(4, 3.0), np.ones(4), np.zeros(4)), np.zeros(4))

    def test_two_point(self):
        np.testing.assert_allclose(layer_norm([1.0, 3.0], np.ones(2), np.zeros(2)), [-1.0, 1.0], atol=1e-5)

    def test_moments(self):
        y = layer_norm(np.random.default_rng(0).normal(size=50), np.ones(50), np.zeros(50), 1e-12)
        assert abs(y.mean()) < 1e-12 and abs(y.var() - 1.0) < 1e-9

    @pytest.mark.parametrize("seed", range(10))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        d = 6
        x, gain, shift, up = rng.normal(size=d), rng.normal(size=d), rng.normal(size=d), rng.normal(size=d)
        dx, dg, ds = layer_norm_backward(up, x, gain)
        for point, grad, f in (
            (x, dx, lambda v: up @ layer_norm(v, gain, shift)),
            (gain, dg, lambda v: up @ layer_norm(x, v, shift)),
            (shift, ds, lambda v: up @ layer_norm(x, gain, v)),
        ):
            assert finite_difference_check(f, grad, point, step=1e-5, tolerance=1e-5).passed


class TestPoolSoftmaxCE:
    def test_mean_pool(self):
        assert mean_pool_rows([[1.0, 2.0]]).tolist() == [1.0, 2.0]
        assert mean_pool_rows([[0.0, 2.0], [2.0, 0.0]]).tolist() == [1.0, 1.0]

    def test_mean_pool_against_sum(self):
        m = np.random.default_rng(3).normal(size=(10, 4))
        oracle = [sum(m[r][c] for r in range(10)) / 10 for c in range(4)]
        np.testing.assert_allclose(mean_pool_rows(m), oracle, rtol=1e-14, atol=1e-15)

    def test_softmax_symmetric(self):
        assert softmax([0.0, 0.0]).tolist() == [0.5, 0.5]

    def test_softmax_stable(self):
        p = softmax([1000.0, 0.0])
        assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0) and p[1] < 1e-300

    @given(arrays(np.float64, 6, elements=finite), st.floats(-50, 50))
    def test_softmax_sum_and_shift(self, x, c):
        p = softmax(x)
        assert abs(p.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(softmax(x + c), p, atol=1e-12)

    def test_ce_perfect(self):
        assert cross_entropy([0.0, 1.0, 0.0], 1) == 0.0

    def test_ce_uniform(self):
        assert cross_entropy(np.full(4, 0.25), 2) == pytest.approx(math.log(4), abs=1e-12)
        assert cross_entropy(np.full(4, 0.25), 2) == pytest.approx(1.386294, abs=1e-6)

    def test_ce_clamps_zero(self):
        assert cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))

    def test_ce_index_error(self):
        with pytest.raises(IndexError):
            cross_entropy([0.5, 0.5], 2)

    @pytest.mark.parametrize("seed", range(10))
    def test_ce_logit_gradient(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(3, 4))
        y = rng.integers(0, 4, size=3)
        loss, grad = softmax_cross_entropy(z, y)
        onehot = np.eye(4)[y]
        np.testing.assert_allclose(grad, (softmax(z) - onehot) / 3, atol=1e-15)
        rep = finite_difference_check(lambda v: softmax_cross_entropy(v.reshape(3, 4), y)[0], grad, z, tolerance=1e-5)
        assert rep.passed, rep


class TestLinearLayer:
    def test_shapes(self):
        layer = LinearLayer.init(3, 2, np.random.default_rng(0))
        assert layer.forward(np.ones(3)).shape == (2,)
        dw, db, dx = layer.backward(np.ones(2))
        assert dw.shape == (2, 3) and db.shape == (2,) and dx.shape == (3,)

    def test_backward_before_forward(self):
        with pytest.raises(StateError):
            LinearLayer(np.ones((2, 2)), np.zeros(2)).backward(np.ones(2))

    @pytest.mark.parametrize("seed", range(10))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        layer = LinearLayer(rng.normal(size=(3, 4)), rng.normal(size=3))
        x, up = rng.normal(size=(2, 4)), rng.normal(size=(2, 3))
        layer.forward(x)
        dw, db, dx = layer.backward(up)

        def with_weight(v):
            return float((up * (x @ v.reshape(3, 4).T + layer.bias)).sum())
        assert finite_difference_check(with_weight, dw, layer.weight, tolerance=1e-5).passed
        assert finite_difference_check(lambda v: float((up * (x @ layer.weight.T + v)).sum()), db, layer.bias,
                                       tolerance=1e-5).passed
        assert finite_difference_check(lambda v: float((up * layer.forward(v.reshape(2, 4))).sum()), dx, x,
                                       tolerance=1e-5).passed


class TestFiniteDifference:
    def test_quadratic(self):
        rep = finite_difference_check(lambda x: float(x @ x), [2.0, 4.0], [1.0, 2.0], step=1e-5, tolerance=1e-8)
        assert rep.passed and rep.max_rel_error < 1e-8 and rep.parameter_count == 2

    def test_wrong_gradient_fails(self):
        rep = finite_difference_check(lambda x: float(x @ x), [2.0, 5.0], [1.0, 2.0])
        assert not rep.passed

    def test_non_finite_names_coordinate(self):
        def f(x):
            return float("nan") if x[1] > 2.0 else float(x.sum())
        with pytest.raises(GradCheckError) as exc:
            finite_difference_check(f, [1.0, 1.0], [0.0, 2.0])
        assert exc.value.coordinate == 1
