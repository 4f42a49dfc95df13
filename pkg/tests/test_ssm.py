import numpy as np
import pytest

from tgem import (
    Dataset,
    NoiseParams,
    StateSpaceModel,
    read_dataset_csv,
    residual,
    simulate,
    stacked_eval,
    write_dataset_csv,
)
from tgem.errors import DivergenceError


class TestStateSpaceModel:
    def test_from_matrices_dims(self, bench_model):
        assert (bench_model.n, bench_model.m, bench_model.p) == (1, 1, 1)
        assert bench_model.noise_dim == 2

    def test_affine_probe_rejects_mismatch(self):
        with pytest.raises(ValueError, match="affine"):
            StateSpaceModel(
                n=1, m=1, p=1,
                transition=lambda t, x, u: np.atleast_1d(0.5 * x[0]),
                output=lambda t, x, u: np.atleast_1d(x[0]),
                affine=__import__("tgem").AffineSpec([[0.9]], [[2.0]], [[1.6]], [[1.2]]),
            )

    def test_nonfinite_evaluation_rejected(self):
        model = StateSpaceModel(
            n=1, m=1, p=1,
            transition=lambda t, x, u: np.atleast_1d(np.inf),
            output=lambda t, x, u: np.atleast_1d(x[0]),
        )
        with pytest.raises(ValueError, match="non-finite"):
            model.eval_transition(1, [0.0], [0.0])


class TestStackedEval:
    def test_benchmark_point(self, bench_model):
        # f(1,1) = 0.9 + 2 = 2.9; g(1,1) = 1.6 + 1.2 = 2.8
        assert stacked_eval(bench_model, 1, [1.0], [1.0]) == pytest.approx([2.9, 2.8])

    def test_zero_maps(self):
        model = StateSpaceModel(
            n=2, m=1, p=1,
            transition=lambda t, x, u: np.zeros(2),
            output=lambda t, x, u: np.zeros(1),
        )
        assert stacked_eval(model, 3, [1.0, 2.0], [0.5]) == pytest.approx([0, 0, 0])

    def test_function_path_matches_matrix_path(self):
        rng = np.random.default_rng(0)
        A, B = rng.standard_normal((3, 3)), rng.standard_normal((3, 2))
        C, D = rng.standard_normal((2, 3)), rng.standard_normal((2, 2))
        model = StateSpaceModel.from_matrices(A, B, C, D)
        for _ in range(10):
            x, u = rng.standard_normal(3), rng.standard_normal(2)
            expected = np.concatenate([A @ x + B @ u, C @ x + D @ u])
            assert stacked_eval(model, 1, x, u) == pytest.approx(expected, abs=1e-14)


class TestResidual:
    def test_zero_map_passthrough(self):
        model = StateSpaceModel(
            n=1, m=1, p=1,
            transition=lambda t, x, u: np.zeros(1),
            output=lambda t, x, u: np.zeros(1),
        )
        r = residual(model, 1, [0.0], [0.5], [0.0], [-0.2])
        assert r == pytest.approx([0.5, -0.2])

    def test_simulate_round_trip_recovers_noise(self, bench_model, bench_noise):
        inputs = np.random.default_rng(3).standard_normal((100, 1))
        data = simulate(bench_model, bench_noise, inputs, [0.0], rng_seed=4)
        worst = 0.0
        for t in range(1, 101):
            r = residual(bench_model, t,
                         data.true_states[t - 1], data.true_states[t],
                         data.inputs[t - 1], data.outputs[t - 1])
            worst = max(worst, float(np.max(np.abs(r - data.true_noise[t - 1]))))
        # (f + w) - f rounds once per step, so "zero" means a few ulps
        assert worst < 1e-14


class TestSimulate:
    def test_epsilon_box_matches_deterministic_recursion(self, bench_model):
        mu = np.array([-0.3, -0.1])
        noise = NoiseParams(mu, np.eye(2), mu - 1e-12, mu + 1e-12)
        inputs = np.random.default_rng(5).standard_normal((50, 1))
        data = simulate(bench_model, noise, inputs, [0.0], rng_seed=6)
        x = 0.0
        for t in range(50):
            y_det = 1.6 * x + 1.2 * inputs[t, 0] - 0.1
            assert abs(data.outputs[t, 0] - y_det) < 1e-9
            x = 0.9 * x + 2.0 * inputs[t, 0] - 0.3
            assert abs(data.true_states[t + 1, 0] - x) < 1e-9

    def test_benchmark_noise_support_and_mean(self, bench_model, bench_noise):
        inputs = np.random.default_rng(7).standard_normal((5000, 1))
        data = simulate(bench_model, bench_noise, inputs, [0.0], rng_seed=8)
        w = data.true_noise[:, 0]
        assert w.min() >= -1.5 and w.max() <= 2.5
        assert abs(w.mean() + 0.09) < 4 * np.sqrt(0.66 / 5000) + 0.001

    def test_deterministic_given_seed(self, bench_model, bench_noise):
        inputs = np.random.default_rng(9).standard_normal((40, 1))
        d1 = simulate(bench_model, bench_noise, inputs, [0.0], rng_seed=10)
        d2 = simulate(bench_model, bench_noise, inputs, [0.0], rng_seed=10)
        assert np.array_equal(d1.outputs, d2.outputs)
        assert np.array_equal(d1.true_states, d2.true_states)

    def test_divergence_aborts(self):
        model = StateSpaceModel.from_matrices([[2.0]], [[0.0]], [[1.0]], [[0.0]])
        noise = NoiseParams([1.0, 0.0], np.eye(2), [0.5, -np.inf], [1.5, np.inf])
        with pytest.raises(DivergenceError):
            simulate(model, noise, np.zeros((200, 1)), [1.0], rng_seed=0)

    def test_dimension_mismatch(self, bench_model):
        noise = NoiseParams([0.0], [[1.0]], [-1.0], [1.0])
        with pytest.raises(ValueError, match="dimension"):
            simulate(bench_model, noise, np.zeros((10, 1)), [0.0], rng_seed=0)


class TestDatasetCsv:
    def test_round_trip_bit_identical(self, tmp_path, bench_model, bench_noise):
        inputs = np.random.default_rng(13).standard_normal((2, 1))
        data = simulate(bench_model, bench_noise, inputs, [0.0], rng_seed=14)
        path = tmp_path / "two.csv"
        write_dataset_csv(data, path)
        first = path.read_bytes()
        again = read_dataset_csv(path)
        write_dataset_csv(again, path)
        assert path.read_bytes() == first

    def test_reader_recovers_values(self, tmp_path, bench_model, bench_noise):
        inputs = np.random.default_rng(15).standard_normal((25, 1))
        data = simulate(bench_model, bench_noise, inputs, [0.0], rng_seed=16)
        path = tmp_path / "d.csv"
        write_dataset_csv(data, path)
        back = read_dataset_csv(path)
        assert np.array_equal(back.inputs, data.inputs)
        assert np.array_equal(back.outputs, data.outputs)
        assert np.array_equal(back.true_states, data.true_states[:25])
        assert np.array_equal(back.x1, data.x1)

    def test_without_states_needs_x1(self, tmp_path, bench_model, bench_noise):
        inputs = np.random.default_rng(17).standard_normal((5, 1))
        data = simulate(bench_model, bench_noise, inputs, [0.3], rng_seed=18)
        path = tmp_path / "nostate.csv"
        write_dataset_csv(data, path, include_states=False)
        assert "x1" not in path.read_text().splitlines()[0]
        with pytest.raises(ValueError, match="x1"):
            read_dataset_csv(path)
        back = read_dataset_csv(path, x1=[0.3])
        assert back.x1 == pytest.approx([0.3])

    def test_malformed_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time,u1,y1\n1,0.0,0.0\n")
        with pytest.raises(ValueError, match="header|column"):
            read_dataset_csv(path, x1=[0.0])

    def test_multidim_round_trip(self, tmp_path):
        rng = np.random.default_rng(19)
        data = Dataset(
            inputs=rng.standard_normal((7, 2)),
            outputs=rng.standard_normal((7, 3)),
            x1=[0.1, -0.2],
        )
        path = tmp_path / "wide.csv"
        write_dataset_csv(data, path)
        back = read_dataset_csv(path, x1=data.x1)
        assert np.array_equal(back.inputs, data.inputs)
        assert np.array_equal(back.outputs, data.outputs)
