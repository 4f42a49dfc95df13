"""Truncated-Gaussian noise estimation for state-space models.

Estimates the pre-truncation mean, covariance, and truncation bounds of the
stacked process/measurement noise of a known discrete-time state-space model
by maximum likelihood, using EM with a particle-smoothing E-step and a
truncated-Gaussian moment-matching M-step.  An exact Kalman/RTS Gaussian
baseline is included for comparison.
"""

from . import errors
from .em import (
    BoundMode,
    EmConfig,
    EmIteration,
    EmTrace,
    FixedPointResult,
    evaluate_vk,
    fixed_point_update,
    initialize,
    moment_residual,
    run_em,
    run_ksem,
    update_bounds,
)
from .estimators import KalmanSmootherNoiseEM, TruncatedGaussianNoiseEM
from .smoothing import (
    ParticleCloud,
    SmoothedMoments,
    SmoothedTrajectories,
    accumulate_moments,
    backward_simulate,
    bootstrap_filter,
    rts_smoother,
)
from .ssm import (
    AffineSpec,
    Dataset,
    StateSpaceModel,
    read_dataset_csv,
    residual,
    simulate,
    stacked_eval,
    write_dataset_csv,
)
from .truncnorm import (
    NoiseParams,
    UniTruncMoments,
    box_mass,
    log_density,
    log_normalizer,
    sample,
    truncated_mean,
    truncated_second_moment,
    uni_moments,
)

__version__ = "0.1.0"

__all__ = [
    "AffineSpec",
    "BoundMode",
    "Dataset",
    "EmConfig",
    "EmIteration",
    "EmTrace",
    "FixedPointResult",
    "KalmanSmootherNoiseEM",
    "NoiseParams",
    "ParticleCloud",
    "SmoothedMoments",
    "SmoothedTrajectories",
    "StateSpaceModel",
    "TruncatedGaussianNoiseEM",
    "UniTruncMoments",
    "accumulate_moments",
    "backward_simulate",
    "bootstrap_filter",
    "box_mass",
    "errors",
    "evaluate_vk",
    "fixed_point_update",
    "initialize",
    "log_density",
    "log_normalizer",
    "moment_residual",
    "read_dataset_csv",
    "residual",
    "rts_smoother",
    "run_em",
    "run_ksem",
    "sample",
    "simulate",
    "stacked_eval",
    "truncated_mean",
    "truncated_second_moment",
    "uni_moments",
    "update_bounds",
    "write_dataset_csv",
]
