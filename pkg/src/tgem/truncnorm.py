"""Box-truncated multivariate Gaussian distribution.

Density, normalization mass, raw and normalized first/second moments, and
sampling for a Gaussian with mean ``mu`` and covariance ``sigma`` restricted
to the hyperrectangle ``[lower, upper]`` and renormalized.  Univariate
moments are closed form (erf/exp based); multivariate moments use the exact
coordinate product form when ``sigma`` is diagonal and Monte Carlo
integration otherwise.

Conventions:

* "raw" moments carry the box mass factor (``raw1 = mass * mean``);
  "normalized" moments are expectations under the truncated distribution.
* Infinite bounds are ordinary ``+/-inf`` floats; a coordinate with bounds
  ``(-inf, +inf)`` is simply untruncated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import erf, log_ndtr, ndtr, ndtri

from .errors import SamplerDegeneracyError, TailDegeneracyError
from .validation import as_matrix, as_vector

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)

# |standardized endpoint| beyond which erf differences cancel catastrophically
# and mass switches to log-domain complement differences.
_TAIL_SWITCH = 6.0

# Box mass below this is treated as a degenerate tail rather than a number.
_MASS_FLOOR = 1e-300

# Relative off-diagonal magnitude below which sigma is treated as diagonal.
_DIAG_RTOL = 1e-9

_DEFAULT_MC_SAMPLES = 100_000


@dataclass(frozen=True)
class NoiseParams:
    """Parameters of a box-truncated Gaussian noise vector.

    Parameters
    ----------
    mu : array, shape (d,)
        Mean of the Gaussian prior to truncation.
    sigma : array, shape (d, d)
        Covariance of the Gaussian prior to truncation; symmetric positive
        definite.
    lower, upper : array, shape (d,)
        Truncation box; entries may be ``-inf`` / ``+inf``.  Requires
        ``lower < upper`` elementwise.
    """

    mu: np.ndarray
    sigma: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        mu = as_vector(self.mu, name="mu")
        d = mu.shape[0]
        sigma = as_matrix(self.sigma, shape=(d, d), name="sigma")
        lower = as_vector(self.lower, length=d, name="lower")
        upper = as_vector(self.upper, length=d, name="upper")
        if not np.all(np.isfinite(mu)):
            raise ValueError("mu must be finite")
        if not np.all(np.isfinite(sigma)):
            raise ValueError("sigma must be finite")
        if np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
            raise ValueError("bounds must not be NaN")
        if np.any(lower == np.inf) or np.any(upper == -np.inf):
            raise ValueError("lower must not be +inf and upper must not be -inf")
        if not np.all(lower < upper):
            raise ValueError("lower < upper must hold for every coordinate")
        scale = max(float(np.max(np.abs(sigma))), 1.0)
        if np.max(np.abs(sigma - sigma.T)) > 1e-10 * scale:
            raise ValueError("sigma must be symmetric")
        sigma = 0.5 * (sigma + sigma.T)
        eigmin = float(np.linalg.eigvalsh(sigma)[0])
        if eigmin <= 1e-12 * float(np.trace(sigma)):
            raise ValueError(
                f"sigma must be strictly positive definite (min eigenvalue {eigmin:.3e})"
            )
        # own private copies so freezing never mutates caller-held arrays
        for name, arr in (("mu", mu), ("sigma", sigma), ("lower", lower), ("upper", upper)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def is_diagonal(self) -> bool:
        """True when off-diagonal entries of sigma are negligible."""
        off = self.sigma - np.diag(np.diag(self.sigma))
        return float(np.max(np.abs(off))) <= _DIAG_RTOL * float(np.max(np.diag(self.sigma)))

    @property
    def bounds_all_infinite(self) -> bool:
        return bool(np.all(np.isneginf(self.lower)) and np.all(np.isposinf(self.upper)))

    def block(self, indices) -> "NoiseParams":
        """Marginal parameters of a coordinate block.

        Only a true marginal when the block is uncorrelated with the
        remaining coordinates (sigma block-diagonal across the split);
        callers are responsible for checking that.
        """
        idx = np.asarray(indices, dtype=int)
        return NoiseParams(
            mu=self.mu[idx],
            sigma=self.sigma[np.ix_(idx, idx)],
            lower=self.lower[idx],
            upper=self.upper[idx],
        )

    def contains(self, x: np.ndarray) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))


@dataclass(frozen=True)
class UniTruncMoments:
    """Raw and normalized moments of a univariate truncated Gaussian.

    ``mass`` is the probability of the box under the untruncated Gaussian;
    ``raw1``/``raw2`` include the mass factor, ``mean``/``second`` do not:
    ``raw1 = mass * mean`` and ``raw2 = mass * second`` by construction.
    """

    mass: float
    raw1: float
    raw2: float
    mean: float
    second: float

    @property
    def variance(self) -> float:
        return self.second - self.mean * self.mean


def _uni_mass(mu: float, s: float, a: float, b: float) -> float:
    """Box probability of N(mu, s^2) over [a, b] with tail-safe evaluation."""
    abar = -np.inf if np.isneginf(a) else (a - mu) / (_SQRT2 * s)
    bbar = np.inf if np.isposinf(b) else (b - mu) / (_SQRT2 * s)
    if abar > _TAIL_SWITCH:
        # both endpoints deep in the upper tail: difference of complements,
        # evaluated in the log domain to dodge 1-1 cancellation
        la = log_ndtr(-abar * _SQRT2)
        lb = -np.inf if np.isposinf(bbar) else log_ndtr(-bbar * _SQRT2)
        return float(-np.exp(la) * np.expm1(lb - la))
    if bbar < -_TAIL_SWITCH:
        lb = log_ndtr(bbar * _SQRT2)
        la = -np.inf if np.isneginf(abar) else log_ndtr(abar * _SQRT2)
        return float(-np.exp(lb) * np.expm1(la - lb))
    ea = -1.0 if np.isneginf(abar) else erf(abar)
    eb = 1.0 if np.isposinf(bbar) else erf(bbar)
    return float(0.5 * (eb - ea))


def uni_moments(mu: float, sigma2: float, a: float, b: float) -> UniTruncMoments:
    """Closed-form moments of a univariate Gaussian truncated to ``[a, b]``.

    Parameters
    ----------
    mu, sigma2 : float
        Mean and variance (``sigma2 > 0``) of the Gaussian prior to truncation.
    a, b : float
        Truncation interval, ``a < b``; either end may be infinite.

    Returns
    -------
    UniTruncMoments

    Raises
    ------
    TailDegeneracyError
        If the box mass underflows (below 1e-300); the distribution is not
        representable and downstream normalized moments would be garbage.
    """
    if not sigma2 > 0.0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    if np.isnan(a) or np.isnan(b):
        raise ValueError("bounds must not be NaN")
    if not a < b:
        raise ValueError(f"a < b required, got a={a}, b={b}")
    s = math.sqrt(sigma2)
    mass = _uni_mass(mu, s, a, b)
    if mass < _MASS_FLOOR:
        raise TailDegeneracyError(
            f"truncation box [{a}, {b}] has vanishing mass under N({mu}, {sigma2})"
        )
    abar = -np.inf if np.isneginf(a) else (a - mu) / (_SQRT2 * s)
    bbar = np.inf if np.isposinf(b) else (b - mu) / (_SQRT2 * s)
    expa = 0.0 if np.isneginf(abar) else math.exp(-abar * abar)
    expb = 0.0 if np.isposinf(bbar) else math.exp(-bbar * bbar)
    raw1 = mu * mass - s * (expb - expa) / _SQRT2PI
    # (mu + b)*exp(-bbar^2) -> 0 as b -> inf; same on the left
    term_b = 0.0 if np.isposinf(bbar) else (mu + b) * expb
    term_a = 0.0 if np.isneginf(abar) else (mu + a) * expa
    raw2 = (mu * mu + sigma2) * mass - s * (term_b - term_a) / _SQRT2PI
    return UniTruncMoments(
        mass=mass, raw1=raw1, raw2=raw2, mean=raw1 / mass, second=raw2 / mass
    )


def _chol(params: NoiseParams) -> np.ndarray:
    return cholesky(params.sigma, lower=True)


def box_mass(
    params: NoiseParams,
    *,
    mc_samples: int = _DEFAULT_MC_SAMPLES,
    rng_seed=None,
) -> float:
    """Probability of the truncation box under the untruncated Gaussian.

    Exact product of univariate masses for diagonal sigma; Monte Carlo
    (fraction of untruncated draws landing in the box) otherwise, which
    requires ``rng_seed``.
    """
    if params.bounds_all_infinite:
        return 1.0
    if params.is_diagonal:
        total = 1.0
        var = np.diag(params.sigma)
        for i in range(params.dim):
            total *= _uni_mass(
                float(params.mu[i]), math.sqrt(float(var[i])),
                float(params.lower[i]), float(params.upper[i]),
            )
        if total < _MASS_FLOOR:
            raise TailDegeneracyError("truncation box has vanishing mass")
        return total
    rng = _as_generator(rng_seed, required=True)
    draws = rng.standard_normal((int(mc_samples), params.dim)) @ _chol(params).T + params.mu
    inside = np.all((draws >= params.lower) & (draws <= params.upper), axis=1)
    frac = float(np.mean(inside))
    if frac <= 0.0:
        raise TailDegeneracyError(
            "Monte Carlo mass estimate is zero; box is unreachable at this sample size"
        )
    return frac


def log_normalizer(
    params: NoiseParams,
    *,
    mc_samples: int = _DEFAULT_MC_SAMPLES,
    rng_seed=None,
) -> float:
    """Log of the density denominator: ``log \\int_box exp(-q(x)/2) dx``.

    Equals ``0.5*log det(2 pi sigma) + log(box mass)``.
    """
    chol_l = _chol(params)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol_l))))
    mass = box_mass(params, mc_samples=mc_samples, rng_seed=rng_seed)
    return 0.5 * (params.dim * math.log(2.0 * math.pi) + logdet) + math.log(mass)


def log_kernel(params: NoiseParams, x) -> float:
    """Unnormalized log density: ``-0.5 (x-mu)' sigma^{-1} (x-mu)`` inside the
    box, ``-inf`` outside.  The normalizer is particle-independent, so this is
    what importance weights actually need."""
    x = as_vector(x, length=params.dim, name="x")
    if not params.contains(x):
        return -np.inf
    z = solve_triangular(_chol(params), x - params.mu, lower=True)
    return -0.5 * float(z @ z)


def log_density(
    params: NoiseParams,
    x,
    *,
    mc_samples: int = _DEFAULT_MC_SAMPLES,
    rng_seed=None,
) -> float:
    """Log probability density of the truncated Gaussian at ``x``.

    Returns ``-inf`` when ``x`` falls outside the truncation box.  For
    non-diagonal sigma the normalization mass is a Monte Carlo estimate and
    ``rng_seed`` must be supplied.
    """
    kern = log_kernel(params, x)
    if kern == -np.inf:
        return -np.inf
    return kern - log_normalizer(params, mc_samples=mc_samples, rng_seed=rng_seed)


def truncated_mean(
    params: NoiseParams,
    *,
    mc_samples: int = _DEFAULT_MC_SAMPLES,
    rng_seed=None,
) -> np.ndarray:
    """Normalized first moment ``E[eta]`` of the truncated Gaussian.

    Exact for untruncated and diagonal-sigma cases; Monte Carlo otherwise
    (``rng_seed`` required).
    """
    if params.bounds_all_infinite:
        return params.mu.copy()
    if params.is_diagonal:
        var = np.diag(params.sigma)
        return np.array([
            uni_moments(float(params.mu[i]), float(var[i]),
                        float(params.lower[i]), float(params.upper[i])).mean
            for i in range(params.dim)
        ])
    draws = sample(params, mc_samples, rng_seed=_require_seed(rng_seed))
    return draws.mean(axis=0)


def truncated_second_moment(
    params: NoiseParams,
    *,
    mc_samples: int = _DEFAULT_MC_SAMPLES,
    rng_seed=None,
) -> np.ndarray:
    """Normalized raw second moment ``E[eta eta']`` of the truncated Gaussian.

    Diagonal sigma: diagonal entries from the univariate closed forms,
    off-diagonal entries ``mean_i * mean_j`` (coordinates are independent
    under box truncation of a diagonal Gaussian).  Non-diagonal: Monte Carlo.
    """
    if params.bounds_all_infinite:
        return params.sigma + np.outer(params.mu, params.mu)
    if params.is_diagonal:
        var = np.diag(params.sigma)
        moments = [
            uni_moments(float(params.mu[i]), float(var[i]),
                        float(params.lower[i]), float(params.upper[i]))
            for i in range(params.dim)
        ]
        means = np.array([m.mean for m in moments])
        out = np.outer(means, means)
        np.fill_diagonal(out, [m.second for m in moments])
        return out
    draws = sample(params, mc_samples, rng_seed=_require_seed(rng_seed))
    return draws.T @ draws / draws.shape[0]


def _require_seed(rng_seed):
    if rng_seed is None:
        raise ValueError(
            "rng_seed is required for Monte Carlo evaluation with non-diagonal sigma"
        )
    return rng_seed


def _as_generator(rng_seed, required: bool = False) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    if rng_seed is None and required:
        _require_seed(None)
    return np.random.default_rng(rng_seed)


def _icdf_draws(mu, s, a, b, unif):
    """Inverse-CDF draws from univariate N(mu, s^2) truncated to [a, b].

    Flips right-tail intervals to the left tail, where ndtr/ndtri keep full
    precision, and clips float round-off back into the box.
    """
    alpha = -np.inf if np.isneginf(a) else (a - mu) / s
    beta = np.inf if np.isposinf(b) else (b - mu) / s
    lo_rep = alpha if np.isfinite(alpha) else 0.0
    hi_rep = beta if np.isfinite(beta) else 0.0
    if lo_rep + hi_rep > 0.0:
        # mirror so the finite action happens in the left tail, where
        # ndtr/ndtri keep full precision
        return -_icdf_draws(-mu, s, -b, -a, unif)
    pa = 0.0 if np.isneginf(alpha) else ndtr(alpha)
    pb = 1.0 if np.isposinf(beta) else ndtr(beta)
    draws = mu + s * ndtri(pa + unif * (pb - pa))
    return np.clip(draws, a, b)


def _sample_diagonal_icdf(params: NoiseParams, count: int, rng: np.random.Generator) -> np.ndarray:
    var = np.diag(params.sigma)
    out = np.empty((count, params.dim))
    for i in range(params.dim):
        out[:, i] = _icdf_draws(
            float(params.mu[i]), math.sqrt(float(var[i])),
            float(params.lower[i]), float(params.upper[i]),
            rng.random(count),
        )
    return out


# Acceptance-rate threshold below which rejection is abandoned.
_MIN_ACCEPTANCE = 1e-4
# Proposals spent before the realized acceptance rate is trusted.
_MONITOR_MIN_PROPOSALS = 200_000


def sample(params: NoiseParams, count: int, rng_seed=None) -> np.ndarray:
    """Draw ``count`` samples from the truncated Gaussian.

    Rejection sampling from the untruncated Gaussian with an acceptance-rate
    monitor.  When acceptance falls below 1e-4: diagonal sigma switches to
    exact coordinate-wise inverse-CDF sampling; non-diagonal sigma raises
    :class:`SamplerDegeneracyError` rather than silently biasing.

    Deterministic for a given integer ``rng_seed`` (a ``numpy`` Generator is
    also accepted).

    Returns
    -------
    array, shape (count, d)
        Every row lies inside the truncation box.
    """
    if count < 1:
        raise ValueError("count must be positive")
    rng = _as_generator(rng_seed)
    d = params.dim
    if params.bounds_all_infinite:
        return rng.standard_normal((count, d)) @ _chol(params).T + params.mu

    diagonal = params.is_diagonal
    if diagonal and box_mass(params) < _MIN_ACCEPTANCE:
        # acceptance rate is known exactly here; skip hopeless rejection
        return _sample_diagonal_icdf(params, count, rng)

    chol_l = _chol(params)
    out = np.empty((count, d))
    got = 0
    proposed = 0
    while got < count:
        batch = int(min(max(4 * (count - got), 1024), 2_000_000))
        z = rng.standard_normal((batch, d)) @ chol_l.T + params.mu
        inside = np.all((z >= params.lower) & (z <= params.upper), axis=1)
        accepted = z[inside]
        take = min(accepted.shape[0], count - got)
        out[got:got + take] = accepted[:take]
        got += take
        proposed += batch
        if got < count and proposed >= _MONITOR_MIN_PROPOSALS:
            if got / proposed < _MIN_ACCEPTANCE:
                if diagonal:
                    out[got:] = _sample_diagonal_icdf(params, count - got, rng)
                    return out
                raise SamplerDegeneracyError(
                    f"rejection acceptance {got / proposed:.2e} below {_MIN_ACCEPTANCE} "
                    "with non-diagonal sigma"
                )
    return out
