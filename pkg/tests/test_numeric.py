import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cfcd.errors import InvalidP, NonFinite, ZeroVector
from cfcd.numeric import (
    cosine_logits,
    finite_diff_check,
    gem_pool,
    gem_pool_backward,
    gem_pool_batch,
    l2_normalize,
)


class TestL2Normalize:
    def test_unit_vector_unchanged(self):
        np.testing.assert_array_equal(l2_normalize([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])

    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], rtol=0, atol=1e-15)

    @pytest.mark.parametrize("v", [[0.0, 0.0], [1e-13, 0.0], []])
    def test_zero_vector(self, v):
        with pytest.raises(ZeroVector):
            l2_normalize(v)

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e3, 1e3)))
    def test_unit_norm(self, v):
        if np.linalg.norm(v) <= 1e-12:
            return
        assert abs(np.linalg.norm(l2_normalize(v)) - 1.0) < 1e-12


class TestGeM:
    def test_constant_grid(self):
        grid = np.full((4, 3, 5), 5.0)
        for p in (1.0, 2.5, 3.0, 10.0):
            np.testing.assert_allclose(gem_pool(grid, p), 5.0, rtol=1e-14)

    def test_p1_two_values(self):
        grid = np.array([1.0, 3.0]).reshape(1, 1, 2)
        assert gem_pool(grid, 1.0)[0] == pytest.approx(2.0, abs=1e-15)

    def test_p3_matches_high_precision_oracle(self):
        mpmath.mp.dps = 40
        oracle = float(mpmath.power((mpmath.mpf(1) + mpmath.mpf(8)) / 2, mpmath.mpf(1) / 3))
        grid = np.array([1.0, 2.0]).reshape(1, 2, 1)
        assert gem_pool(grid, 3.0)[0] == pytest.approx(oracle, rel=1e-14)
        assert oracle == pytest.approx(1.65096, abs=1e-5)

    def test_invalid_p(self):
        with pytest.raises(InvalidP):
            gem_pool(np.ones((1, 2, 2)), 0.5)

    def test_p1_is_mean(self, rng):
        for _ in range(50):
            grid = rng.uniform(0.0, 3.0, size=(int(rng.integers(1, 6)), 4, 3))
            np.testing.assert_allclose(gem_pool(grid, 1.0), grid.reshape(grid.shape[0], -1).mean(1), rtol=0, atol=1e-12)

    def test_monotone_in_p(self, rng):
        for _ in range(100):
            grid = rng.uniform(0.0, 2.0, size=(3, 4, 4))
            pooled = [gem_pool(grid, p) for p in (1, 2, 3, 8)]
            for lo, hi in zip(pooled, pooled[1:]):
                assert np.all(hi >= lo - 1e-12)

    def test_negative_values_are_floored(self):
        grid = np.array([-1.0, -2.0]).reshape(1, 1, 2)
        assert gem_pool(grid, 3.0)[0] == pytest.approx(1e-6)

    def test_backward_at_constant_is_mean_gradient(self):
        x = np.full((2, 3, 16), 0.7)
        pooled, xc = gem_pool_batch(x, 3.0)
        g = gem_pool_backward(xc, pooled, np.ones((2, 3)), 3.0)
        np.testing.assert_allclose(g, 1.0 / 16, rtol=0, atol=1e-10)


class TestCosineLogits:
    def test_self_similarity(self):
        w = np.array([[0.3, -1.2, 2.0]])
        assert cosine_logits(w, w)[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_logits([[1.0, 0.0]], [[0.0, 2.0]])[0, 0] == 0.0

    def test_hand_computed(self):
        out = cosine_logits([[1.0, 1.0]], [[1.0, 0.0], [0.0, -1.0]])
        np.testing.assert_allclose(out, [[1 / math.sqrt(2), -1 / math.sqrt(2)]], atol=1e-15)

    def test_bounds(self, rng):
        for _ in range(100):
            f = rng.standard_normal((5, 7)) * rng.uniform(1e-3, 1e3)
            w = rng.standard_normal((9, 7))
            out = cosine_logits(f, w)
            assert out.shape == (5, 9)
            assert np.all(np.abs(out) <= 1 + 1e-9)

    def test_zero_row(self):
        with pytest.raises(ZeroVector):
            cosine_logits([[0.0, 0.0]], [[1.0, 0.0]])


class TestFiniteDiff:
    def test_square(self):
        report = finite_diff_check(lambda x: (float(x[0] ** 2), 2 * x), [3.0], h=1e-5, tol=1e-8)
        assert report.passed
        assert report.max_rel_error < 1e-8

    def test_detects_wrong_gradient(self):
        report = finite_diff_check(lambda x: (float(np.sum(x**3)), 2 * x), [1.0, 2.0], h=1e-5)
        assert not report.passed

    def test_nonfinite(self):
        with pytest.raises(NonFinite):
            finite_diff_check(lambda x: (float("nan"), x), [1.0])

    def test_bad_step(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda x: (0.0, x), [1.0], h=0.5)
