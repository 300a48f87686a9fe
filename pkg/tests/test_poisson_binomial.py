from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from defaultcast.poisson_binomial import (
    naive_pi,
    normal_approx_cdf,
    pb_cdf,
    sample_count,
)
from defaultcast._rng import substream

from _oracles import pb_cdf_enumeration, pb_pmf_enumeration


class TestPbCdf:
    def test_two_fair_coins(self):
        dist = pb_cdf([0.5, 0.5])
        np.testing.assert_allclose(dist.cdf, [0.25, 0.75, 1.0], atol=1e-12)

    def test_small_case_matches_enumeration(self):
        dist = pb_cdf([0.1, 0.2, 0.3])
        assert dist.pmf[0] == pytest.approx(0.9 * 0.8 * 0.7, abs=1e-12)
        np.testing.assert_allclose(dist.cdf, pb_cdf_enumeration([0.1, 0.2, 0.3]), atol=1e-12)

    def test_equal_p_matches_binomial_to_n50(self):
        rng = np.random.default_rng(0)
        for n in (1, 7, 23, 50):
            p = float(rng.uniform(0.05, 0.95))
            dist = pb_cdf(np.full(n, p))
            expected = binom.cdf(np.arange(n + 1), n, p)
            np.testing.assert_allclose(dist.cdf, expected, atol=1e-10)

    def test_random_vectors_match_enumeration(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(1, 13))
            p = rng.random(n)
            np.testing.assert_allclose(
                pb_cdf(p).cdf, pb_cdf_enumeration(p), atol=1e-10
            )

    def test_empty_vector(self):
        dist = pb_cdf([])
        np.testing.assert_array_equal(dist.cdf, [1.0])

    def test_degenerate_probabilities(self):
        dist = pb_cdf([1.0, 1.0, 0.0])
        np.testing.assert_allclose(dist.pmf, [0.0, 0.0, 1.0, 0.0], atol=1e-12)

    def test_domain_error(self):
        with pytest.raises(ValueError):
            pb_cdf([0.5, 1.2])
        with pytest.raises(ValueError):
            pb_cdf([-0.1])

    def test_cdf_terminates_at_one_and_monotone(self):
        rng = np.random.default_rng(2)
        p = rng.random(200)
        dist = pb_cdf(p)
        assert dist.cdf[-1] == pytest.approx(1.0, abs=1e-9)
        assert np.all(np.diff(dist.cdf) >= -1e-12)

    def test_mean_identity(self):
        rng = np.random.default_rng(3)
        p = rng.random(300)
        dist = pb_cdf(p)
        mean = float(np.sum(dist.pmf * np.arange(p.size + 1)))
        assert mean == pytest.approx(p.sum(), abs=1e-8)

    def test_large_vector_stability(self):
        rng = np.random.default_rng(4)
        p = rng.random(5000)
        dist = pb_cdf(p)  # raises ArithmeticError if the transform degrades
        assert dist.imag_residual < 1e-9
        assert dist.overshoot < 1e-9
        assert dist.cdf[-1] == pytest.approx(1.0, abs=1e-9)

    def test_overshoot_within_tight_tolerance_at_moderate_sizes(self):
        rng = np.random.default_rng(5)
        for n in (10, 25, 50):
            dist = pb_cdf(rng.random(n))
            assert dist.overshoot <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.random(int(rng.integers(1, 40)))
        base = pb_cdf(p).cdf
        np.testing.assert_allclose(pb_cdf(rng.permutation(p)).cdf, base, atol=1e-11)


class TestNaivePi:
    def test_all_zero_probabilities(self):
        assert naive_pi(np.zeros(10), 0.10) == (0, 0)

    def test_binomial_quantile_oracle(self):
        assert naive_pi(np.full(20, 0.5), 0.10) == (6, 14)

    def test_near_degenerate_alpha_collapses_to_median(self):
        p = np.random.default_rng(6).random(15)
        lo, hi = naive_pi(p, 0.9999)
        assert lo == hi

    def test_alpha_domain(self):
        with pytest.raises(ValueError):
            naive_pi([0.5], 0.0)
        with pytest.raises(ValueError):
            naive_pi([0.5], 1.0)

    def test_left_inversion_definition(self):
        p = np.random.default_rng(7).random(25)
        dist = pb_cdf(p)
        lo, hi = naive_pi(p, 0.10)
        assert dist.cdf[lo] >= 0.05
        assert lo == 0 or dist.cdf[lo - 1] < 0.05
        assert dist.cdf[hi] >= 0.95
        assert hi == 0 or dist.cdf[hi - 1] < 0.95


class TestSampleCount:
    def test_all_ones(self):
        assert sample_count(np.ones(17), substream(0)) == 17

    def test_all_zeros(self):
        assert sample_count(np.zeros(9), substream(0)) == 0

    def test_empirical_zero_count_frequency(self):
        p = np.array([0.1, 0.2, 0.3])
        rng = substream(11)
        draws = 100_000
        zeros = sum(sample_count(p, rng) == 0 for _ in range(draws))
        target = 0.504
        se = np.sqrt(target * (1 - target) / draws)
        assert abs(zeros / draws - target) <= 3 * se

    def test_deterministic_given_seed(self):
        p = np.random.default_rng(8).random(30)
        a = [sample_count(p, substream(5, i)) for i in range(10)]
        b = [sample_count(p, substream(5, i)) for i in range(10)]
        assert a == b


class TestNormalApprox:
    def test_tracks_exact_cdf(self):
        rng = np.random.default_rng(9)
        p = rng.uniform(0.2, 0.8, 150)
        exact = pb_cdf(p).cdf
        approx = normal_approx_cdf(p)
        assert np.max(np.abs(exact - approx)) < 5e-3

    def test_second_order_beats_plain_normal_when_skewed(self):
        p = np.full(80, 0.05)  # skewed count distribution
        exact = pb_cdf(p).cdf
        plain = normal_approx_cdf(p, second_order=False)
        corrected = normal_approx_cdf(p, second_order=True)
        assert np.max(np.abs(exact - corrected)) < np.max(np.abs(exact - plain))
