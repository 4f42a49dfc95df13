"""E-step engines: bootstrap particle filter, backward-simulation smoother,
moment accumulation, and the exact affine Kalman/RTS path.

The particle pipeline is

    bootstrap_filter -> backward_simulate -> accumulate_moments

producing the smoothed residual moments (psi, phi) and per-coordinate
residual extrema that the EM M-step consumes.  For affine models with fully
Gaussian (infinite-bound) noise, :func:`rts_smoother` computes the same
quantities exactly, including support for nonzero noise means and
cross-covariance between the process- and measurement-noise blocks.

Cloud indexing convention: row ``s`` of a cloud holds particles for state
``x[s+1]`` (``s = 0..N``), weighted by the measurements observed up to and
including ``y[s+1]`` (states beyond the last measurement keep their carried
weights).  ``x[1]`` is known, so row 0 is degenerate at ``x1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from . import truncnorm
from .errors import FilterDegeneracyError
from .ssm import Dataset, StateSpaceModel
from .validation import symmetrize

# Measurement steps with zero total weight recover with uniform weights; this
# many consecutive recoveries abort the filter.
_MAX_CONSECUTIVE_DEGENERATE = 3

# Proposals per still-unresolved trajectory in successive backward
# rejection-sampling rounds; rows left after these fall back to dense
# weights.  Fat rounds amortize per-call overhead.
_BACKWARD_RS_SCHEDULE = (4, 16)

# Tolerance for the required zero cross-covariance between the w and v blocks.
_BLOCK_RTOL = 1e-9


@dataclass(frozen=True)
class ParticleCloud:
    """Forward filter output: particles, filtered weights, resampling
    ancestry, and diagnostics.  Carries the input sequence so the backward
    pass can re-evaluate transitions."""

    particles: np.ndarray        # (N+1, M, n)
    weights: np.ndarray          # (N+1, M), rows sum to 1
    ancestors: np.ndarray        # (N+1, M) int, row 0 is identity
    inputs: np.ndarray           # (N, m)
    loglik_estimate: float
    ess: np.ndarray              # (N+1,)
    degenerate_steps: tuple[int, ...] = ()

    def __post_init__(self):
        if self.particles.ndim != 3 or self.weights.shape != self.particles.shape[:2]:
            raise ValueError("particles and weights shapes disagree")
        sums = self.weights.sum(axis=1)
        if np.any(self.weights < 0) or np.max(np.abs(sums - 1.0)) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1 at every step")

    @property
    def num_particles(self) -> int:
        return self.particles.shape[1]

    @property
    def n_steps(self) -> int:
        return self.particles.shape[0] - 1


@dataclass(frozen=True)
class SmoothedTrajectories:
    """Equally weighted joint state trajectories drawn by backward simulation."""

    states: np.ndarray           # (L, N+1, n)
    loglik_estimate: float = np.nan   # carried over from the generating cloud
    fallback_steps: tuple[int, ...] = ()

    def __post_init__(self):
        if self.states.ndim != 3 or self.states.shape[0] < 1:
            raise ValueError("states must be a nonempty (L, N+1, n) array")

    @property
    def num_trajectories(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class SmoothedMoments:
    """Smoothed residual statistics consumed by the M-step.

    ``psi``/``phi`` are the time-averaged smoothed first/second moments of
    the stacked residuals; ``res_min``/``res_max`` their elementwise extrema
    over every (time, trajectory) pair (``-inf``/``+inf`` markers for the
    exact Gaussian path, whose support is everywhere).
    """

    psi: np.ndarray
    phi: np.ndarray
    res_min: np.ndarray
    res_max: np.ndarray
    loglik_estimate: float = np.nan

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=float)
        phi = symmetrize(np.asarray(self.phi, dtype=float))
        res_min = np.asarray(self.res_min, dtype=float)
        res_max = np.asarray(self.res_max, dtype=float)
        d = psi.shape[0]
        if phi.shape != (d, d) or res_min.shape != (d,) or res_max.shape != (d,):
            raise ValueError("inconsistent moment shapes")
        if np.any(res_min > res_max):
            raise ValueError("res_min must be <= res_max elementwise")
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "res_min", res_min)
        object.__setattr__(self, "res_max", res_max)


def _split_blocks(model: StateSpaceModel, noise: truncnorm.NoiseParams):
    """Marginals of the w and v blocks; rejects correlated blocks, which the
    prior-proposal filter cannot factorize."""
    n, d = model.n, noise.dim
    if d != model.noise_dim:
        raise ValueError(f"noise dimension {d} does not match n + p = {model.noise_dim}")
    cross = noise.sigma[:n, n:]
    scale = float(np.max(np.diag(noise.sigma)))
    if cross.size and float(np.max(np.abs(cross))) > _BLOCK_RTOL * scale:
        raise ValueError(
            "bootstrap filtering requires zero cross-covariance between the "
            "process-noise and measurement-noise blocks"
        )
    w_marg = noise.block(np.arange(n))
    v_marg = noise.block(np.arange(n, d))
    return w_marg, v_marg


class _BlockKernel:
    """Vectorized unnormalized kernel evaluation for one noise block.

    Hot path: called once per backward-sampling round, so the Cholesky
    factor is inverted once up front and everything else is plain ufunc
    work."""

    def __init__(self, params: truncnorm.NoiseParams):
        self.params = params
        chol = cholesky(params.sigma, lower=True)
        self._inv_chol = solve_triangular(chol, np.eye(params.dim), lower=True)
        self._mu = params.mu
        self._lower = params.lower
        self._upper = params.upper
        self._finite_box = bool(np.any(np.isfinite(params.lower))
                                or np.any(np.isfinite(params.upper)))

    def density(self, residuals: np.ndarray) -> np.ndarray:
        """exp(-quadform/2) with the box indicator, rows of ``residuals``."""
        r = residuals
        if self._mu.shape[0] == 1:
            z = (r[:, 0] - self._mu[0]) * self._inv_chol[0, 0]
            out = np.exp(-0.5 * z * z)
            if self._finite_box:
                out *= (r[:, 0] >= self._lower[0]) & (r[:, 0] <= self._upper[0])
            return out
        z = (r - self._mu) @ self._inv_chol.T
        quad = np.einsum("ij,ij->i", z, z)
        out = np.exp(-0.5 * quad)
        if self._finite_box:
            inside = ((r >= self._lower) & (r <= self._upper)).all(axis=1)
            out *= inside
        return out


def _systematic_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    M = weights.shape[0]
    positions = (np.arange(M) + rng.random()) / M
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.minimum(np.searchsorted(cum, positions), M - 1)


def bootstrap_filter(
    model: StateSpaceModel,
    noise: truncnorm.NoiseParams,
    data: Dataset,
    num_particles: int,
    rng_seed=None,
) -> ParticleCloud:
    """Prior-proposal bootstrap filter with systematic resampling.

    Particles propagate by sampling the truncated state-noise marginal;
    weights multiply the unnormalized truncated measurement-noise density
    (the normalization constant is particle-independent and cancels).
    Resampling triggers when the effective sample size drops below half the
    particle count.  Accumulates an estimate of the data log-likelihood.

    Measurement steps where every particle lands outside the
    measurement-noise box recover with uniform weights and are flagged in
    ``degenerate_steps``; three consecutive recoveries raise
    :class:`~tgem.errors.FilterDegeneracyError`.
    """
    M = int(num_particles)
    if M < 2:
        raise ValueError("num_particles must be at least 2")
    w_marg, v_marg = _split_blocks(model, noise)
    rng = np.random.default_rng(rng_seed)
    v_kernel = _BlockKernel(v_marg)
    log_zv = truncnorm.log_normalizer(v_marg, rng_seed=rng)

    N = data.n_samples
    u, y = data.inputs, data.outputs
    particles = np.empty((N + 1, M, model.n))
    weights = np.empty((N + 1, M))
    ancestors = np.empty((N + 1, M), dtype=np.int64)
    ess = np.empty(N + 1)
    degenerate: list[int] = []
    consecutive = 0

    particles[0] = data.x1
    weights[0] = 1.0 / M
    ancestors[0] = np.arange(M)
    ess[0] = float(M)

    # y[1] attaches to the known x1: a particle-independent likelihood term
    r1 = y[0] - model.eval_output(1, data.x1, u[0])
    dens1 = float(v_kernel.density(r1[None, :])[0])
    if dens1 > 0.0:
        loglik = math.log(dens1) - log_zv
    else:
        loglik = -np.inf
        degenerate.append(1)
        consecutive = 1

    # per-step process noise is i.i.d., so one batched draw serves every step
    all_noise = truncnorm.sample(w_marg, N * M, rng_seed=rng).reshape(N, M, model.n)

    identity = np.arange(M)
    for s in range(1, N + 1):
        w_prev = weights[s - 1]
        if 1.0 / float(np.sum(w_prev * w_prev)) < M / 2:
            idx = _systematic_indices(w_prev, rng)
            src = particles[s - 1][idx]
            carry = np.full(M, 1.0 / M)
        else:
            idx = identity
            src = particles[s - 1]
            carry = w_prev
        ancestors[s] = idx
        particles[s] = model.transition_batch(s, src, u[s - 1]) + all_noise[s - 1]

        if s <= N - 1:
            resid = y[s] - model.output_batch(s + 1, particles[s], u[s])
            dens = v_kernel.density(resid)
            total = float(np.sum(carry * dens))
            if total <= 0.0:
                weights[s] = 1.0 / M
                degenerate.append(s + 1)
                consecutive += 1
                loglik = -np.inf
                if consecutive >= _MAX_CONSECUTIVE_DEGENERATE:
                    raise FilterDegeneracyError(
                        f"{consecutive} consecutive degenerate measurement steps "
                        f"(last at t={s + 1})"
                    )
            else:
                consecutive = 0
                loglik += math.log(total) - log_zv
                weights[s] = carry * dens / total
        else:
            weights[s] = carry
        ess[s] = 1.0 / float(np.sum(weights[s] ** 2))

    return ParticleCloud(
        particles=particles,
        weights=weights,
        ancestors=ancestors,
        inputs=u.copy(),
        loglik_estimate=loglik,
        ess=ess,
        degenerate_steps=tuple(degenerate),
    )


def backward_simulate(
    cloud: ParticleCloud,
    model: StateSpaceModel,
    noise: truncnorm.NoiseParams,
    num_trajectories: int,
    rng_seed=None,
) -> SmoothedTrajectories:
    """Backward-simulation smoothing over a filter cloud.

    Draws the final state from the last filter weights, then walks backward
    reweighting filter particles by the truncated transition kernel of the
    sampled successor.  Implemented with rejection sampling against the
    filter-weight proposal (the unnormalized kernel is bounded by 1), which
    costs O(N L) kernel evaluations in the typical case; rows still
    unresolved after a few rounds fall back to the dense categorical.  Steps
    whose dense weights are all zero fall back to the plain filter weights
    and are flagged in ``fallback_steps``.
    """
    L = int(num_trajectories)
    if L < 1:
        raise ValueError("num_trajectories must be at least 1")
    w_marg, _ = _split_blocks(model, noise)
    rng = np.random.default_rng(rng_seed)
    kernel = _BlockKernel(w_marg)

    parts, weights, u = cloud.particles, cloud.weights, cloud.inputs
    N = cloud.n_steps
    M = cloud.num_particles
    fallback: list[int] = []

    states = np.empty((L, N + 1, model.n))
    cum = np.cumsum(weights[N])
    cum[-1] = 1.0
    end_idx = np.minimum(np.searchsorted(cum, rng.random(L)), M - 1)
    states[:, N] = parts[N][end_idx]

    if model.affine is not None:
        all_predicted = parts[:N] @ model.affine.A.T \
            + (u @ model.affine.B.T)[:, None, :]      # (N, M, n)
    else:
        all_predicted = None
    all_cum = np.cumsum(weights, axis=1)

    for s in range(N - 1, -1, -1):
        # pair (x[s+1] = parts[s], x[s+2] = states[:, s+1]); transition f_{s+1}
        if all_predicted is not None:
            predicted = all_predicted[s]
        else:
            predicted = model.transition_batch(s + 1, parts[s], u[s])   # (M, n)
        cum = all_cum[s]
        total = cum[-1]
        successors = states[:, s + 1]
        todo = np.arange(L)
        chosen = np.empty(L, dtype=np.int64)
        for proposals in _BACKWARD_RS_SCHEDULE:
            if todo.size == 0:
                break
            k = todo.size
            idx = np.minimum(
                np.searchsorted(cum, rng.random((k, proposals)) * total), M - 1)
            resid = successors[todo][:, None, :] - predicted[idx]
            prob = kernel.density(resid.reshape(-1, model.n)).reshape(k, proposals)
            accepted = rng.random((k, proposals)) < prob
            hit = accepted.any(axis=1)
            first = accepted.argmax(axis=1)
            rows = np.arange(k)[hit]
            chosen[todo[rows]] = idx[rows, first[hit]]
            todo = todo[~hit]
        if todo.size:
            # dense categorical for the stubborn rows
            resid = successors[todo][:, None, :] - predicted[None, :, :]
            dens = kernel.density(resid.reshape(-1, model.n)).reshape(todo.size, M)
            wmat = dens * weights[s][None, :]
            row_sum = wmat.sum(axis=1)
            dead = row_sum <= 0.0
            if np.any(dead):
                # no filter particle is transition-compatible: fall back to
                # the filter weights and flag the step
                wmat[dead] = weights[s][None, :]
                row_sum = wmat.sum(axis=1)
                fallback.append(s + 1)
            csum = np.cumsum(wmat, axis=1)
            draws = rng.random(todo.size) * row_sum
            chosen[todo] = np.minimum((csum < draws[:, None]).sum(axis=1), M - 1)
        states[:, s] = parts[s][chosen]

    return SmoothedTrajectories(
        states=states,
        loglik_estimate=cloud.loglik_estimate,
        fallback_steps=tuple(sorted(set(fallback))),
    )


def accumulate_moments(
    traj: SmoothedTrajectories,
    model: StateSpaceModel,
    data: Dataset,
) -> SmoothedMoments:
    """Sample moments of the stacked residuals over smoothed trajectories.

    ``psi`` and ``phi`` average the residual and its outer product over the
    equally weighted trajectories, then over time; the extrema fields record
    the smallest axis-aligned box containing every sampled residual.
    """
    L, steps, _ = traj.states.shape
    N = data.n_samples
    if steps != N + 1:
        raise ValueError(f"trajectories cover {steps} states, expected N+1 = {N + 1}")
    d = model.noise_dim
    u, y = data.inputs, data.outputs
    if model.affine is not None:
        # time-invariant matrices: evaluate every (trajectory, t) residual in
        # a few einsum-sized operations instead of a per-t loop
        spec = model.affine
        x_t = traj.states[:, :N]                  # (L, N, n)
        resid = np.empty((L, N, d))
        resid[:, :, : model.n] = traj.states[:, 1:] - x_t @ spec.A.T - u @ spec.B.T
        resid[:, :, model.n:] = y - x_t @ spec.C.T - u @ spec.D.T
        flat = resid.reshape(L * N, d)
        psi = flat.mean(axis=0)
        phi = symmetrize(flat.T @ flat / (L * N))
        res_min = flat.min(axis=0)
        res_max = flat.max(axis=0)
    else:
        psi = np.zeros(d)
        phi = np.zeros((d, d))
        res_min = np.full(d, np.inf)
        res_max = np.full(d, -np.inf)
        resid = np.empty((L, d))
        for t in range(1, N + 1):
            x_t = traj.states[:, t - 1]
            resid[:, : model.n] = traj.states[:, t] \
                - model.transition_batch(t, x_t, u[t - 1])
            resid[:, model.n:] = y[t - 1] - model.output_batch(t, x_t, u[t - 1])
            psi += resid.mean(axis=0)
            phi += resid.T @ resid / L
            np.minimum(res_min, resid.min(axis=0), out=res_min)
            np.maximum(res_max, resid.max(axis=0), out=res_max)
        psi /= N
        phi = symmetrize(phi / N)
    return SmoothedMoments(
        psi=psi,
        phi=phi,
        res_min=res_min,
        res_max=res_max,
        loglik_estimate=traj.loglik_estimate,
    )


# -- exact affine path -------------------------------------------------------


def _gaussian_blocks(model: StateSpaceModel, noise: truncnorm.NoiseParams):
    n = model.n
    mu_w, mu_v = noise.mu[:n], noise.mu[n:]
    Q = noise.sigma[:n, :n]
    R = noise.sigma[n:, n:]
    S = noise.sigma[:n, n:]
    return mu_w, mu_v, Q, R, S


def rts_smoother(
    model: StateSpaceModel,
    noise: truncnorm.NoiseParams,
    data: Dataset,
) -> SmoothedMoments:
    """Exact Kalman filter + RTS smoother moments for affine Gaussian models.

    Requires ``model.affine`` and all-infinite bounds.  Supports nonzero
    noise means and cross-covariance between the w and v blocks via the
    standard reduction to an equivalent uncorrelated system whose transition
    matrix is ``A - S R^{-1} C`` and whose state equation is driven by the
    observed output.  Returns exact ``psi``/``phi`` built from smoothed
    means, covariances, and lag-one cross-covariances, with the exact
    Gaussian data log-likelihood; the residual extrema are set to the
    ``-inf``/``+inf`` markers (Gaussian support is everywhere).
    """
    if model.affine is None:
        raise ValueError("rts_smoother requires a model with an affine spec")
    if noise.dim != model.noise_dim:
        raise ValueError(f"noise dimension {noise.dim} does not match n + p = {model.noise_dim}")
    if not noise.bounds_all_infinite:
        raise ValueError("rts_smoother requires all truncation bounds infinite")

    A = model.affine.A
    B = model.affine.B
    C = model.affine.C
    D = model.affine.D
    mu_w, mu_v, Q, R, S = _gaussian_blocks(model, noise)
    n, p = model.n, model.p
    N = data.n_samples
    u, y = data.inputs, data.outputs

    # reduction to uncorrelated process noise: w = G v + w*, G = S R^{-1}
    G = np.linalg.solve(R, S.T).T
    A_star = A - G @ C
    Q_star = symmetrize(Q - G @ S.T)

    xp = np.empty((N + 1, n))
    Pp = np.empty((N + 1, n, n))
    xf = np.empty((N, n))
    Pf = np.empty((N, n, n))
    xp[0] = data.x1
    Pp[0] = np.zeros((n, n))
    loglik = 0.0
    log2pi = math.log(2.0 * math.pi)

    for i in range(N):
        # measurement y[i+1] on state x[i+1]
        e = y[i] - C @ xp[i] - D @ u[i] - mu_v
        S_e = symmetrize(C @ Pp[i] @ C.T + R)
        chol_e = cholesky(S_e, lower=True)
        z = solve_triangular(chol_e, e, lower=True)
        loglik += -0.5 * (p * log2pi + float(z @ z)) - float(np.sum(np.log(np.diag(chol_e))))
        K = np.linalg.solve(S_e.T, (Pp[i] @ C.T).T).T
        xf[i] = xp[i] + K @ e
        Pf[i] = symmetrize(Pp[i] - K @ C @ Pp[i])
        # prediction through the decorrelated transition
        drive = B @ u[i] + mu_w + G @ (y[i] - D @ u[i] - mu_v)
        xp[i + 1] = A_star @ xf[i] + drive
        Pp[i + 1] = symmetrize(A_star @ Pf[i] @ A_star.T + Q_star)

    xs = np.empty((N + 1, n))
    Ps = np.empty((N + 1, n, n))
    Mc = np.empty((N, n, n))       # Cov(x[s+2], x[s+1] | all data)
    xs[N] = xp[N]
    Ps[N] = Pp[N]
    for i in range(N - 1, -1, -1):
        J = np.linalg.solve(Pp[i + 1].T, (Pf[i] @ A_star.T).T).T
        xs[i] = xf[i] + J @ (xs[i + 1] - xp[i + 1])
        Ps[i] = symmetrize(Pf[i] + J @ (Ps[i + 1] - Pp[i + 1]) @ J.T)
        Mc[i] = Ps[i + 1] @ J.T

    d = model.noise_dim
    psi = np.zeros(d)
    phi = np.zeros((d, d))
    for t in range(N):
        w_mean = xs[t + 1] - A @ xs[t] - B @ u[t]
        v_mean = y[t] - C @ xs[t] - D @ u[t]
        w_cov = Ps[t + 1] + A @ Ps[t] @ A.T - Mc[t] @ A.T - A @ Mc[t].T
        v_cov = C @ Ps[t] @ C.T
        wv_cov = (A @ Ps[t] - Mc[t]) @ C.T
        psi[:n] += w_mean
        psi[n:] += v_mean
        phi[:n, :n] += w_cov + np.outer(w_mean, w_mean)
        phi[n:, n:] += v_cov + np.outer(v_mean, v_mean)
        cross = wv_cov + np.outer(w_mean, v_mean)
        phi[:n, n:] += cross
        phi[n:, :n] += cross.T
    psi /= N
    phi = symmetrize(phi / N)
    return SmoothedMoments(
        psi=psi,
        phi=phi,
        res_min=np.full(d, -np.inf),
        res_max=np.full(d, np.inf),
        loglik_estimate=loglik,
    )
