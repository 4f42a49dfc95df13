import numpy as np
import pytest

from tgem import (
    Dataset,
    KalmanSmootherNoiseEM,
    NoiseParams,
    TruncatedGaussianNoiseEM,
    simulate,
)


@pytest.fixture(scope="module")
def small_uy(bench_model, bench_noise):
    inputs = np.random.default_rng(71).standard_normal((150, 1))
    data = simulate(bench_model, bench_noise, inputs, [0.0], rng_seed=72)
    return data.inputs, data.outputs


class TestSklearnProtocol:
    def test_get_set_params_round_trip(self, bench_model):
        est = TruncatedGaussianNoiseEM(model=bench_model, particles=123,
                                       random_state=9)
        params = est.get_params()
        assert params["particles"] == 123
        assert params["random_state"] == 9
        est.set_params(particles=77)
        assert est.particles == 77

    def test_clone_compatibility(self, bench_model):
        sklearn = pytest.importorskip("sklearn")
        from sklearn.base import clone

        est = TruncatedGaussianNoiseEM(
            model=bench_model,
            bound_modes=[("fixed", -1.5, 2.5), "infinite"],
            max_iterations=3,
        )
        twin = clone(est)
        assert twin.get_params(deep=False) == est.get_params(deep=False)

    def test_unfitted_access_raises(self, bench_model):
        est = TruncatedGaussianNoiseEM(model=bench_model)
        with pytest.raises(AttributeError):
            est.sample_noise(10)

    def test_missing_model_raises(self, small_uy):
        U, y = small_uy
        with pytest.raises(ValueError, match="model"):
            TruncatedGaussianNoiseEM().fit(U, y)


class TestTruncatedGaussianNoiseEM:
    def test_fit_sets_attributes(self, bench_model, small_uy):
        U, y = small_uy
        est = TruncatedGaussianNoiseEM(
            model=bench_model,
            bound_modes=[("fixed", -1.5, 2.5), "infinite"],
            max_iterations=3,
            particles=100,
            random_state=0,
        )
        out = est.fit(U, y)
        assert out is est
        assert est.mu_.shape == (2,)
        assert est.sigma_.shape == (2, 2)
        assert est.lower_[0] == -1.5 and np.isposinf(est.upper_[1])
        assert est.n_iter_ <= 3
        assert len(est.trace_.entries) == est.n_iter_ + 1

    def test_fit_accepts_dataset(self, bench_model, bench_data):
        est = TruncatedGaussianNoiseEM(
            model=bench_model,
            bound_modes=[("fixed", -1.5, 2.5), "infinite"],
            max_iterations=2,
            particles=80,
        )
        est.fit(bench_data)
        assert est.converged_ in (True, False)

    def test_deterministic_given_random_state(self, bench_model, small_uy):
        U, y = small_uy
        fits = []
        for _ in range(2):
            est = TruncatedGaussianNoiseEM(
                model=bench_model,
                bound_modes=[("fixed", -1.5, 2.5), "infinite"],
                max_iterations=2, particles=90, random_state=5)
            est.fit(U, y)
            fits.append((est.mu_.copy(), est.sigma_.copy()))
        assert np.array_equal(fits[0][0], fits[1][0])
        assert np.array_equal(fits[0][1], fits[1][1])

    def test_initial_params_tuple(self, bench_model, small_uy):
        U, y = small_uy
        est = TruncatedGaussianNoiseEM(
            model=bench_model,
            bound_modes=[("fixed", -1.5, 2.5), "infinite"],
            max_iterations=1, particles=60,
            initial_params=([-0.3, -0.1], np.diag([1.0, 0.5]),
                            [-1.5, -np.inf], [2.5, np.inf]),
        )
        est.fit(U, y)
        assert est.trace_.entries[0].beta.mu == pytest.approx([-0.3, -0.1])

    def test_sample_noise_respects_fitted_box(self, bench_model, small_uy):
        U, y = small_uy
        est = TruncatedGaussianNoiseEM(
            model=bench_model,
            bound_modes=[("fixed", -1.5, 2.5), "infinite"],
            max_iterations=2, particles=60)
        est.fit(U, y)
        draws = est.sample_noise(500, random_state=1)
        assert np.all(draws[:, 0] >= -1.5) and np.all(draws[:, 0] <= 2.5)


class TestKalmanSmootherNoiseEM:
    def test_fit_on_gaussian_data(self, bench_model, bench_gauss_data):
        est = KalmanSmootherNoiseEM(model=bench_model, max_iterations=20)
        est.fit(bench_gauss_data)
        assert np.all(np.isneginf(est.lower_)) and np.all(np.isposinf(est.upper_))
        assert est.sigma_[0, 1] == 0.0

    def test_matches_run_ksem(self, bench_model, bench_gauss_data, bench_gauss_noise):
        from tgem import EmConfig, run_ksem

        est = KalmanSmootherNoiseEM(
            model=bench_model, max_iterations=5,
            initial_params=bench_gauss_noise)
        est.fit(bench_gauss_data)
        trace = run_ksem(bench_model, bench_gauss_data,
                         EmConfig(max_iterations=5), init=bench_gauss_noise)
        assert est.mu_ == pytest.approx(trace.final.mu, abs=0)
        assert est.sigma_ == pytest.approx(trace.final.sigma, abs=0)

    def test_estimates_noise_statistics(self, bench_model, bench_gauss_noise):
        inputs = np.random.default_rng(73).standard_normal((1500, 1))
        data = simulate(bench_model, bench_gauss_noise, inputs, [0.0], rng_seed=74)
        est = KalmanSmootherNoiseEM(model=bench_model, max_iterations=30)
        est.fit(data)
        assert est.mu_[0] == pytest.approx(-0.3, abs=0.12)
        assert est.sigma_[0, 0] == pytest.approx(1.0, rel=0.15)
