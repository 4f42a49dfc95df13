"""Scikit-learn style estimator wrappers around the EM drivers.

Both estimators follow the fit/get_params protocol, so they clone and
compose with scikit-learn tooling; the package itself only needs
``sklearn`` when it is installed (a minimal local base supplies
``get_params``/``set_params`` otherwise).
"""

from __future__ import annotations

import inspect

import numpy as np

try:  # pragma: no cover - exercised implicitly by the import system
    from sklearn.base import BaseEstimator as _SkBase

    class _EstimatorBase(_SkBase):
        pass

except ImportError:  # pragma: no cover

    class _EstimatorBase:
        """Minimal stand-in implementing the get_params/set_params protocol."""

        @classmethod
        def _get_param_names(cls):
            sig = inspect.signature(cls.__init__)
            return sorted(p for p in sig.parameters if p != "self")

        def get_params(self, deep=True):
            return {name: getattr(self, name) for name in self._get_param_names()}

        def set_params(self, **params):
            valid = set(self._get_param_names())
            for key, value in params.items():
                if key not in valid:
                    raise ValueError(f"invalid parameter {key!r} for {type(self).__name__}")
                setattr(self, key, value)
            return self


from . import truncnorm
from .em import BoundMode, EmConfig, run_em, run_ksem
from .ssm import Dataset, StateSpaceModel
from .truncnorm import NoiseParams


def _as_dataset(U, y, x1, model: StateSpaceModel) -> Dataset:
    if isinstance(U, Dataset):
        return U
    if y is None:
        raise ValueError("y is required when U is not already a Dataset")
    if x1 is None:
        x1 = np.zeros(model.n)
    return Dataset(inputs=U, outputs=y, x1=x1)


def _as_noise_params(init) -> NoiseParams | None:
    if init is None or isinstance(init, NoiseParams):
        return init
    mu, sigma, lower, upper = init
    return NoiseParams(mu=mu, sigma=sigma, lower=lower, upper=upper)


class _NoiseEMBase(_EstimatorBase):
    """Shared fit machinery; subclasses pick the EM driver."""

    _driver = None  # staticmethod set by subclasses

    def _build_config(self) -> EmConfig:
        raise NotImplementedError

    def fit(self, U, y=None, x1=None):
        """Estimate the stacked-noise parameters from input/output data.

        Parameters
        ----------
        U : array of shape (N, m), or Dataset
            Input sequence; passing a :class:`~tgem.ssm.Dataset` covers
            ``y`` and ``x1`` too.
        y : array of shape (N, p)
            Output sequence.
        x1 : array of shape (n,), optional
            Known initial state (defaults to zeros).

        Returns
        -------
        self
        """
        if self.model is None:
            raise ValueError("a StateSpaceModel must be supplied as `model`")
        data = _as_dataset(U, y, x1, self.model)
        config = self._build_config()
        trace = type(self)._driver(
            self.model, data, config, init=_as_noise_params(self.initial_params))
        beta = trace.final
        self.mu_ = beta.mu.copy()
        self.sigma_ = beta.sigma.copy()
        self.lower_ = beta.lower.copy()
        self.upper_ = beta.upper.copy()
        self.noise_params_ = beta
        self.trace_ = trace
        self.n_iter_ = trace.iterations_used
        self.converged_ = trace.converged
        self.loglik_ = trace.entries[-1].loglik_estimate
        return self

    def _check_fitted(self):
        if not hasattr(self, "noise_params_"):
            raise AttributeError("estimator is not fitted yet; call fit first")


class TruncatedGaussianNoiseEM(_NoiseEMBase):
    """Maximum-likelihood truncated-Gaussian noise estimator.

    Estimates the pre-truncation mean and covariance of the stacked
    process/measurement noise of a known state-space model, together with
    per-coordinate truncation bounds (fixed, estimated from the smoothed
    residual support, or infinite), using EM with a particle-smoothing
    E-step.

    Parameters
    ----------
    model : StateSpaceModel
        The known system whose noise is being estimated.
    bound_modes : sequence, optional
        One entry per noise coordinate: ``"infinite"``, ``"estimate"``, or
        ``("fixed", lower, upper)``.  None means untruncated everywhere.
    max_iterations, param_rel_tol : int, float
        EM stopping rules (iteration cap and componentwise relative-change
        tolerance).
    particles, trajectories : int
        Particle-filter size and backward-simulation trajectory count
        (``trajectories=None`` matches ``particles``).
    fixed_point_max_iters, fixed_point_tol : int, float
        Inner M-step fixed-point budget and tolerance.
    bound_inflation : float
        Safety margin added to estimated bounds, relative to the residual
        span.
    random_state : int
        Master seed; fits are deterministic given it.
    initial_params : NoiseParams or (mu, sigma, lower, upper), optional
        Explicit starting point; default is a moment-based initialization
        from a first smoothing pass.

    Attributes
    ----------
    mu_, sigma_, lower_, upper_ : arrays
        Final noise parameter estimate.
    noise_params_ : NoiseParams
        The same estimate as one object.
    trace_ : EmTrace
        Full per-iteration history with diagnostics.
    n_iter_ : int
    converged_ : bool
    loglik_ : float
        Final E-step log-likelihood estimate.
    """

    _driver = staticmethod(run_em)

    def __init__(
        self,
        model: StateSpaceModel | None = None,
        *,
        bound_modes=None,
        max_iterations: int = 40,
        param_rel_tol: float = 1e-4,
        particles: int = 500,
        trajectories: int | None = None,
        fixed_point_max_iters: int = 200,
        fixed_point_tol: float = 1e-9,
        bound_inflation: float = 0.01,
        random_state: int = 0,
        initial_params=None,
    ):
        self.model = model
        self.bound_modes = bound_modes
        self.max_iterations = max_iterations
        self.param_rel_tol = param_rel_tol
        self.particles = particles
        self.trajectories = trajectories
        self.fixed_point_max_iters = fixed_point_max_iters
        self.fixed_point_tol = fixed_point_tol
        self.bound_inflation = bound_inflation
        self.random_state = random_state
        self.initial_params = initial_params

    def _build_config(self) -> EmConfig:
        modes = self.bound_modes
        if modes is not None:
            modes = tuple(BoundMode.from_spec(m) for m in modes)
        return EmConfig(
            max_iterations=self.max_iterations,
            param_rel_tol=self.param_rel_tol,
            num_particles=self.particles,
            num_trajectories=self.trajectories,
            fixed_point_max_iters=self.fixed_point_max_iters,
            fixed_point_tol=self.fixed_point_tol,
            bound_modes=modes,
            bound_inflation=self.bound_inflation,
            master_seed=self.random_state,
        )

    def sample_noise(self, n_samples: int, random_state: int = 0) -> np.ndarray:
        """Draw stacked-noise samples from the fitted distribution."""
        self._check_fitted()
        return truncnorm.sample(self.noise_params_, n_samples, rng_seed=random_state)


class KalmanSmootherNoiseEM(_NoiseEMBase):
    """Gaussian-noise EM baseline (exact Kalman/RTS E-step).

    Same interface as :class:`TruncatedGaussianNoiseEM` minus the particle
    and bound options; requires an affine model.  The fitted ``lower_`` /
    ``upper_`` are infinite by construction.
    """

    _driver = staticmethod(run_ksem)

    def __init__(
        self,
        model: StateSpaceModel | None = None,
        *,
        max_iterations: int = 40,
        param_rel_tol: float = 1e-4,
        initial_params=None,
    ):
        self.model = model
        self.max_iterations = max_iterations
        self.param_rel_tol = param_rel_tol
        self.initial_params = initial_params

    def _build_config(self) -> EmConfig:
        return EmConfig(
            max_iterations=self.max_iterations,
            param_rel_tol=self.param_rel_tol,
        )
