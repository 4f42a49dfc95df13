import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import chi2

from tgem import (
    NoiseParams,
    box_mass,
    log_density,
    sample,
    truncated_mean,
    truncated_second_moment,
    uni_moments,
)
from tgem.errors import SamplerDegeneracyError, TailDegeneracyError

from oracles import quad_uni_moments


def _grid_cases(count, seed):
    """Random (mu, sigma2, a, b) cases with finite and one-sided bounds."""
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(count):
        mu = rng.uniform(-3, 3)
        sigma2 = rng.uniform(0.1, 4)
        s = math.sqrt(sigma2)
        kind = rng.integers(3)
        if kind == 0:
            a = mu + rng.uniform(-4, 1) * s
            b = a + rng.uniform(0.2, 5) * s
        elif kind == 1:
            a = -np.inf
            b = mu + rng.uniform(-2, 4) * s
        else:
            a = mu + rng.uniform(-4, 2) * s
            b = np.inf
        cases.append((mu, sigma2, a, b))
    return cases


class TestUniMoments:
    def test_untruncated_standard_normal(self):
        m = uni_moments(0.0, 1.0, -np.inf, np.inf)
        assert m.mass == 1.0
        assert m.mean == 0.0
        assert m.second == 1.0

    @pytest.mark.parametrize("c", [0.5, 1.0, 2.7])
    def test_symmetric_box_has_zero_mean(self, c):
        m = uni_moments(0.0, 1.0, -c, c)
        assert m.raw1 == pytest.approx(0.0, abs=1e-16)
        assert m.mean == pytest.approx(0.0, abs=1e-16)

    def test_benchmark_truncation_moments(self):
        # frozen from the quadrature oracle: mass of N(-0.3,1) over [-1.5, 2.5];
        # the exact normalized moments are mean -0.0888986, variance 0.6662321
        m = uni_moments(-0.3, 1.0, -1.5, 2.5)
        assert m.mass == pytest.approx(0.8823751994, abs=1e-10)
        assert m.mean == pytest.approx(-0.0888986414, abs=1e-9)
        assert m.variance == pytest.approx(0.6662321107, abs=1e-9)
        assert m.mean == pytest.approx(-0.09, abs=0.005)
        assert m.variance == pytest.approx(0.66, abs=0.01)

    @pytest.mark.parametrize("case", _grid_cases(60, seed=0))
    def test_matches_quadrature(self, case):
        mu, sigma2, a, b = case
        m = uni_moments(mu, sigma2, a, b)
        mass, raw1, raw2 = quad_uni_moments(mu, sigma2, a, b)
        assert m.mass == pytest.approx(mass, abs=1e-9)
        assert m.raw1 == pytest.approx(raw1, abs=1e-9)
        assert m.raw2 == pytest.approx(raw2, abs=1e-9)

    @pytest.mark.parametrize("case", _grid_cases(40, seed=1))
    def test_raw_normalized_consistency_and_support(self, case):
        mu, sigma2, a, b = case
        m = uni_moments(mu, sigma2, a, b)
        assert 0.0 < m.mass <= 1.0
        assert m.raw1 == pytest.approx(m.mass * m.mean, rel=1e-12)
        assert m.raw2 == pytest.approx(m.mass * m.second, rel=1e-12)
        assert a <= m.mean <= b
        assert m.variance >= -1e-12

    def test_untruncated_limit_at_50_sigma(self):
        # wide-box limit reproduces the plain Gaussian moments
        for mu, sigma2 in [(0.7, 1.3), (-2.0, 0.4), (0.0, 3.9)]:
            s = math.sqrt(sigma2)
            m = uni_moments(mu, sigma2, mu - 50 * s, mu + 50 * s)
            assert abs(m.mass - 1.0) < 1e-12
            assert abs(m.mean - mu) < 1e-10
            assert abs(m.second - (mu * mu + sigma2)) < 1e-8

    def test_deep_tail_mass_stays_positive(self):
        # both endpoints far in one tail: the log-domain path must not cancel
        m = uni_moments(0.0, 1.0, 9.0, 10.0)
        assert m.mass > 0
        assert 9.0 <= m.mean <= 10.0

    def test_underflowing_box_raises(self):
        with pytest.raises(TailDegeneracyError):
            uni_moments(0.0, 1.0, 40.0, 41.0)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            uni_moments(0.0, -1.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            uni_moments(0.0, 1.0, 2.0, 1.0)


class TestNoiseParams:
    def test_rejects_non_pd_sigma(self):
        with pytest.raises(ValueError):
            NoiseParams([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]], [-1, -1], [1, 1])

    def test_rejects_asymmetric_sigma(self):
        with pytest.raises(ValueError):
            NoiseParams([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]], [-1, -1], [1, 1])

    def test_rejects_bad_bounds(self):
        with pytest.raises(ValueError):
            NoiseParams([0.0], [[1.0]], [2.0], [1.0])
        with pytest.raises(ValueError):
            NoiseParams([0.0], [[1.0]], [np.inf], [np.inf])

    def test_immutable_and_does_not_freeze_caller_arrays(self):
        mu = np.array([0.0])
        params = NoiseParams(mu, [[1.0]], [-1.0], [1.0])
        mu[0] = 5.0  # caller array stays writable, params unaffected
        assert params.mu[0] == 0.0
        with pytest.raises(ValueError):
            params.mu[0] = 1.0


class TestLogDensity:
    def test_outside_box_is_minus_inf(self):
        params = NoiseParams([0.0], [[1.0]], [-1.0], [1.0])
        assert log_density(params, [1.5]) == -np.inf

    def test_untruncated_standard_normal_at_zero(self):
        params = NoiseParams([0.0], [[1.0]], [-np.inf], [np.inf])
        assert log_density(params, [0.0]) == pytest.approx(
            -0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_truncated_equals_gaussian_minus_log_mass(self):
        params = NoiseParams([-0.3], [[1.0]], [-1.5], [2.5])
        mass = quad_uni_moments(-0.3, 1.0, -1.5, 2.5)[0]
        expected = (-0.5 * math.log(2 * math.pi) - 0.5 * 0.09) - math.log(mass)
        assert log_density(params, [0.0]) == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize("case", _grid_cases(15, seed=3))
    def test_density_integrates_to_one(self, case):
        mu, sigma2, a, b = case
        s = math.sqrt(sigma2)
        params = NoiseParams([mu], [[sigma2]], [a], [b])
        lo = max(a, mu - 10 * s)
        hi = min(b, mu + 10 * s)
        total = quad(lambda x: math.exp(log_density(params, [x])), lo, hi,
                     epsabs=1e-12, epsrel=1e-12, limit=200)[0]
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_dimension_mismatch(self):
        params = NoiseParams([0.0], [[1.0]], [-1.0], [1.0])
        with pytest.raises(ValueError):
            log_density(params, [0.0, 0.0])


class TestMultivariateMoments:
    def test_symmetric_box_zero_mean(self):
        params = NoiseParams([0.0, 0.0], np.eye(2), [-1.0, -2.0], [1.0, 2.0])
        assert truncated_mean(params) == pytest.approx([0.0, 0.0], abs=1e-15)

    def test_untruncated_second_moment(self):
        sigma = np.array([[2.0, 0.3], [0.3, 1.0]])
        mu = np.array([0.5, -1.0])
        params = NoiseParams(mu, sigma, [-np.inf] * 2, [np.inf] * 2)
        expected = sigma + np.outer(mu, mu)
        assert truncated_second_moment(params) == pytest.approx(expected, abs=1e-14)

    def test_diagonal_case_equals_univariate(self):
        params = NoiseParams([-0.3, -0.1], [[1.0, 0.0], [0.0, 0.5]],
                             [-1.5, -np.inf], [2.5, np.inf])
        m1 = uni_moments(-0.3, 1.0, -1.5, 2.5)
        mean = truncated_mean(params)
        assert mean[0] == pytest.approx(m1.mean, abs=1e-12)
        assert mean[1] == pytest.approx(-0.1, abs=1e-12)
        second = truncated_second_moment(params)
        assert second[0, 0] == pytest.approx(m1.second, abs=1e-12)
        assert second[1, 1] == pytest.approx(0.5 + 0.01, abs=1e-12)
        assert second[0, 1] == pytest.approx(m1.mean * -0.1, abs=1e-12)

    def test_scalar_benchmark_mean(self):
        params = NoiseParams([-0.3], [[1.0]], [-1.5], [2.5])
        assert truncated_mean(params)[0] == pytest.approx(-0.09, abs=0.005)
        second = truncated_second_moment(params)[0, 0]
        mean = truncated_mean(params)[0]
        assert second - mean ** 2 == pytest.approx(0.66, abs=0.01)

    def test_monte_carlo_agrees_with_exact_on_near_diagonal(self):
        # tiny off-diagonal defeats the diagonal fast path, so the MC route
        # runs; the product-form values are the oracle (the 1e-6 correlation
        # shifts moments far less than the allowed 3 standard errors)
        for seed in range(20):
            sigma = np.array([[1.0, 1e-6], [1e-6, 0.5]])
            params = NoiseParams([-0.3, -0.1], sigma, [-1.5, -np.inf], [2.5, np.inf])
            exact = NoiseParams([-0.3, -0.1], [[1.0, 0.0], [0.0, 0.5]],
                                [-1.5, -np.inf], [2.5, np.inf])
            n = 20_000
            mc = truncated_mean(params, mc_samples=n, rng_seed=seed)
            ref = truncated_mean(exact)
            se = np.sqrt(np.array([0.66, 0.5]) / n)
            assert np.all(np.abs(mc - ref) < 3.5 * se)

    def test_mean_strictly_inside_box_and_cov_psd(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            d = int(rng.integers(1, 4))
            mu = rng.uniform(-1, 1, d)
            var = rng.uniform(0.2, 2.0, d)
            lo = mu - rng.uniform(0.3, 3.0, d) * np.sqrt(var)
            hi = mu + rng.uniform(0.3, 3.0, d) * np.sqrt(var)
            params = NoiseParams(mu, np.diag(var), lo, hi)
            mean = truncated_mean(params)
            assert np.all(mean > lo) and np.all(mean < hi)
            cov = truncated_second_moment(params) - np.outer(mean, mean)
            assert np.linalg.eigvalsh(cov)[0] > -1e-10

    def test_non_diagonal_requires_seed(self):
        sigma = np.array([[1.0, 0.4], [0.4, 1.0]])
        params = NoiseParams([0.0, 0.0], sigma, [-1.0, -1.0], [1.0, 1.0])
        with pytest.raises(ValueError, match="rng_seed"):
            truncated_mean(params)


class TestSampling:
    def test_all_draws_inside_box(self):
        params = NoiseParams([0.2, -0.5], [[1.0, 0.3], [0.3, 0.8]],
                             [-1.0, -np.inf], [0.8, 0.5])
        draws = sample(params, 5000, rng_seed=0)
        assert draws.shape == (5000, 2)
        assert np.all(draws >= params.lower) and np.all(draws <= params.upper)

    def test_deterministic_given_seed(self):
        params = NoiseParams([0.0], [[1.0]], [-1.0], [2.0])
        a = sample(params, 100, rng_seed=42)
        b = sample(params, 100, rng_seed=42)
        assert np.array_equal(a, b)

    def test_benchmark_empirical_mean(self):
        params = NoiseParams([-0.3], [[1.0]], [-1.5], [2.5])
        draws = sample(params, 100_000, rng_seed=7)
        tol = 4 * math.sqrt(0.66 / 100_000)
        assert abs(draws.mean() + 0.09) < tol + 0.001  # 0.001 covers the -0.09 rounding

    def test_half_line_empirical_mean_matches_closed_form(self):
        params = NoiseParams([0.0], [[1.0]], [0.0], [np.inf])
        draws = sample(params, 100_000, rng_seed=8)
        m = uni_moments(0.0, 1.0, 0.0, np.inf)
        se = math.sqrt(m.variance / 100_000)
        assert abs(draws.mean() - m.mean) < 4 * se

    def test_low_mass_diagonal_falls_back_to_inverse_cdf(self):
        # box mass ~ 3e-7: rejection is hopeless, the exact path must kick in
        params = NoiseParams([0.0], [[1.0]], [5.0], [6.0])
        draws = sample(params, 2000, rng_seed=3)
        assert np.all((draws >= 5.0) & (draws <= 6.0))
        m = uni_moments(0.0, 1.0, 5.0, 6.0)
        assert abs(draws.mean() - m.mean) < 5 * math.sqrt(max(m.variance, 1e-6) / 2000)

    def test_low_mass_correlated_raises(self):
        sigma = np.array([[1.0, 0.6], [0.6, 1.0]])
        params = NoiseParams([0.0, 0.0], sigma, [5.0, 5.0], [6.0, 6.0])
        with pytest.raises(SamplerDegeneracyError):
            sample(params, 100, rng_seed=1)

    def test_epsilon_box_draws_pin_to_center(self):
        params = NoiseParams([0.7], [[1.0]], [0.7 - 1e-12], [0.7 + 1e-12])
        draws = sample(params, 500, rng_seed=5)
        assert np.all(np.abs(draws - 0.7) <= 1e-12)

    def test_chi_square_goodness_of_fit(self):
        params = NoiseParams([-0.3], [[1.0]], [-1.5], [2.5])
        draws = sample(params, 100_000, rng_seed=123)[:, 0]
        edges = np.linspace(-1.5, 2.5, 21)
        counts, _ = np.histogram(draws, bins=edges)
        total = uni_moments(-0.3, 1.0, -1.5, 2.5).mass
        probs = np.array([
            uni_moments(-0.3, 1.0, edges[i], edges[i + 1]).mass / total
            for i in range(20)
        ])
        expected = probs * draws.shape[0]
        stat = float(np.sum((counts - expected) ** 2 / expected))
        assert stat < chi2.ppf(0.99, df=19)


class TestBoxMass:
    def test_product_form(self):
        params = NoiseParams([0.0, 1.0], [[1.0, 0.0], [0.0, 4.0]],
                             [-1.0, -np.inf], [1.0, 1.0])
        m1 = quad_uni_moments(0.0, 1.0, -1.0, 1.0)[0]
        m2 = quad_uni_moments(1.0, 4.0, -np.inf, 1.0)[0]
        assert box_mass(params) == pytest.approx(m1 * m2, rel=1e-9)

    def test_monte_carlo_close_to_product(self):
        sigma = np.array([[1.0, 1e-7], [1e-7, 4.0]])
        params = NoiseParams([0.0, 1.0], sigma, [-1.0, -np.inf], [1.0, 1.0])
        m1 = quad_uni_moments(0.0, 1.0, -1.0, 1.0)[0]
        m2 = quad_uni_moments(1.0, 4.0, -np.inf, 1.0)[0]
        est = box_mass(params, mc_samples=200_000, rng_seed=0)
        assert est == pytest.approx(m1 * m2, abs=0.01)
