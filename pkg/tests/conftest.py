import numpy as np
import pytest

from tgem import NoiseParams, StateSpaceModel, simulate


@pytest.fixture(scope="session")
def bench_model():
    """The scalar benchmark system: x' = 0.9x + 2u, y = 1.6x + 1.2u."""
    return StateSpaceModel.from_matrices([[0.9]], [[2.0]], [[1.6]], [[1.2]])


@pytest.fixture(scope="session")
def bench_noise():
    """Truncated state noise, untruncated measurement noise."""
    return NoiseParams(
        mu=[-0.3, -0.1],
        sigma=[[1.0, 0.0], [0.0, 0.5]],
        lower=[-1.5, -np.inf],
        upper=[2.5, np.inf],
    )


@pytest.fixture(scope="session")
def bench_gauss_noise():
    """Same moments, all bounds infinite."""
    return NoiseParams(
        mu=[-0.3, -0.1],
        sigma=[[1.0, 0.0], [0.0, 0.5]],
        lower=[-np.inf, -np.inf],
        upper=[np.inf, np.inf],
    )


@pytest.fixture(scope="session")
def bench_data(bench_model, bench_noise):
    """N=300 simulated dataset from the truncated benchmark."""
    inputs = np.random.default_rng(11).standard_normal((300, 1))
    return simulate(bench_model, bench_noise, inputs, [0.0], rng_seed=12)


@pytest.fixture(scope="session")
def bench_gauss_data(bench_model, bench_gauss_noise):
    """N=200 simulated dataset from the Gaussian benchmark."""
    inputs = np.random.default_rng(21).standard_normal((200, 1))
    return simulate(bench_model, bench_gauss_noise, inputs, [0.0], rng_seed=22)
