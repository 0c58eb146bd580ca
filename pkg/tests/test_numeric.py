"""Seeded streams, the Gaussian sampler and the dense kernels."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from wppg.numeric import Rng, logsumexp, mat_vec


class TestGaussian:
    def test_mean_of_a_million_draws(self):
        z = Rng(0).gaussian(10**6)
        assert abs(z.mean()) < 4.0 / math.sqrt(10**6)

    def test_variance_of_a_million_draws(self):
        z = Rng(1).gaussian(10**6)
        assert abs(z.var() - 1.0) < 0.01

    def test_same_seed_same_stream(self):
        np.testing.assert_array_equal(Rng(42).gaussian(1000), Rng(42).gaussian(1000))

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(42).gaussian(10), Rng(43).gaussian(10))

    def test_kolmogorov_smirnov(self):
        z = Rng(7).gaussian(10**5)
        assert stats.kstest(z, "norm").pvalue > 1e-3

    @pytest.mark.parametrize("n", [1, 2, 3, 17])
    def test_odd_and_even_lengths(self, n):
        z = Rng(3).gaussian(n)
        assert z.shape == (n,)
        assert np.all(np.isfinite(z))

    def test_rejects_empty_request(self):
        with pytest.raises(ValueError):
            Rng(0).gaussian(0)

    def test_rejects_negative_seed(self):
        with pytest.raises(ValueError):
            Rng(-1)


class TestStreamSplitting:
    def test_child_independent_of_sibling_draws(self):
        a = Rng(5)
        first = a.child("env").gaussian(50)
        b = Rng(5)
        b.child("actor").gaussian(1000)
        b.gaussian(333)
        np.testing.assert_array_equal(b.child("env").gaussian(50), first)

    def test_labels_give_distinct_streams(self):
        r = Rng(5)
        assert not np.array_equal(r.child("env").gaussian(20), r.child("critic").gaussian(20))

    def test_nested_paths_are_reproducible(self):
        x = Rng(9).child("a").child("b").normal((3, 4))
        y = Rng(9, ("a", "b")).normal((3, 4))
        np.testing.assert_array_equal(x, y)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), label=st.text(min_size=1, max_size=8))
    def test_determinism_property(self, seed, label):
        np.testing.assert_array_equal(Rng(seed).child(label).normal(7), Rng(seed).child(label).normal(7))


class TestMatVec:
    def test_identity(self):
        v = np.array([1.5, -2.0, 3.0])
        np.testing.assert_array_equal(mat_vec(np.eye(3), v), v)

    def test_zero_matrix(self):
        np.testing.assert_array_equal(mat_vec(np.zeros((2, 3)), [1.0, 2.0, 3.0]), np.zeros(2))

    def test_direct_arithmetic(self):
        np.testing.assert_array_equal(mat_vec([[1, 2], [3, 4]], [1, 1]), [3.0, 7.0])

    def test_dimension_mismatch_raises(self):
        with pytest.raises(ValueError):
            mat_vec(np.eye(3), np.ones(2))

    def test_vector_must_be_one_dimensional(self):
        with pytest.raises(ValueError):
            mat_vec(np.eye(2), np.ones((2, 1)))

    def test_output_is_float64(self):
        assert mat_vec([[1, 0], [0, 1]], [1, 2]).dtype == np.float64


class TestLogSumExp:
    def test_matches_naive_in_safe_range(self):
        x = Rng(0).normal((4, 6))
        np.testing.assert_allclose(logsumexp(x, axis=1), np.log(np.exp(x).sum(axis=1)), rtol=1e-13)

    def test_stable_when_everything_underflows(self):
        x = np.array([-2000.0, -2001.0])
        np.testing.assert_allclose(logsumexp(x), -2000.0 + math.log1p(math.exp(-1.0)), rtol=1e-14)
