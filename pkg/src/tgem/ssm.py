"""State-space model representation, residuals, simulation, and dataset I/O.

The model is the discrete-time system

    x[t+1] = f_t(x[t], u[t]) + w[t]
    y[t]   = g_t(x[t], u[t]) + v[t]

with the stacked noise ``eta[t] = [w[t]; v[t]]`` drawn i.i.d. from a
box-truncated Gaussian (:class:`~tgem.truncnorm.NoiseParams`).  Time indices
are 1-based in the math and passed through to the user evaluation functions;
the initial state ``x1`` is known, never estimated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import truncnorm
from .errors import DivergenceError
from .validation import as_matrix, as_vector

# Simulated states beyond this magnitude abort as divergence.
_DIVERGENCE_LIMIT = 1e12

# Seed for the construction-time probe of affine consistency.
_PROBE_SEED = 0x5A7E


@dataclass(frozen=True)
class AffineSpec:
    """Matrices (A, B, C, D) declaring the model affine:
    f(x, u) = A x + B u and g(x, u) = C x + D u."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = as_matrix(self.A, name="A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError("A must be square")
        B = as_matrix(self.B, name="B")
        if B.shape[0] != n:
            raise ValueError("B must have as many rows as A")
        m = B.shape[1]
        C = as_matrix(self.C, name="C")
        if C.shape[1] != n:
            raise ValueError("C must have as many columns as A")
        p = C.shape[0]
        D = as_matrix(self.D, shape=(p, m), name="D")
        for name, arr in (("A", A), ("B", B), ("C", C), ("D", D)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.A.shape[0], self.B.shape[1], self.C.shape[0]


@dataclass(frozen=True)
class StateSpaceModel:
    """Known transition/output maps of a discrete-time state-space system.

    Parameters
    ----------
    n, m, p : int
        State, input, and output dimensions.
    transition : callable ``(t, x, u) -> array (n,)``
        Evaluates f_t.  With ``vectorized=True`` it must also accept a batch
        ``x`` of shape (k, n) and return (k, n).
    output : callable ``(t, x, u) -> array (p,)``
        Evaluates g_t, same batching convention.
    affine : AffineSpec, optional
        Declares the model affine; enables the exact Kalman path.  Checked
        against ``transition``/``output`` on random probe points at
        construction (tolerance 1e-12).
    vectorized : bool
        Whether the evaluation functions accept batched states.
    """

    n: int
    m: int
    p: int
    transition: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    output: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    affine: AffineSpec | None = None
    vectorized: bool = False

    def __post_init__(self):
        if min(self.n, self.p) < 1 or self.m < 0:
            raise ValueError("dimensions must satisfy n >= 1, p >= 1, m >= 0")
        if self.affine is not None:
            if self.affine.dims != (self.n, self.m, self.p):
                raise ValueError(
                    f"affine matrices have dims {self.affine.dims}, expected "
                    f"{(self.n, self.m, self.p)}"
                )
            self._probe_affine()

    def _probe_affine(self) -> None:
        rng = np.random.default_rng(_PROBE_SEED)
        for t in (1, 2, 7):
            x = rng.standard_normal(self.n)
            u = rng.standard_normal(self.m)
            fx = as_vector(self.transition(t, x, u), length=self.n, name="transition(t,x,u)")
            gx = as_vector(self.output(t, x, u), length=self.p, name="output(t,x,u)")
            fa = self.affine.A @ x + self.affine.B @ u
            ga = self.affine.C @ x + self.affine.D @ u
            if np.max(np.abs(fx - fa)) > 1e-12 or np.max(np.abs(gx - ga)) > 1e-12:
                raise ValueError(
                    "affine matrices disagree with the evaluation functions at probe points"
                )

    @classmethod
    def from_matrices(cls, A, B, C, D) -> "StateSpaceModel":
        """Build an affine model directly from its matrices (vectorized)."""
        spec = AffineSpec(A, B, C, D)
        n, m, p = spec.dims

        def transition(t, x, u):
            x = np.asarray(x, dtype=float)
            return x @ spec.A.T + np.asarray(u, dtype=float) @ spec.B.T

        def output(t, x, u):
            x = np.asarray(x, dtype=float)
            return x @ spec.C.T + np.asarray(u, dtype=float) @ spec.D.T

        return cls(n=n, m=m, p=p, transition=transition, output=output,
                   affine=spec, vectorized=True)

    @property
    def noise_dim(self) -> int:
        return self.n + self.p

    # -- evaluation ---------------------------------------------------------

    def eval_transition(self, t: int, x, u) -> np.ndarray:
        val = self.transition(t, np.asarray(x, dtype=float), np.asarray(u, dtype=float))
        val = as_vector(val, length=self.n, name="transition value")
        if not np.all(np.isfinite(val)):
            raise ValueError(f"transition returned non-finite values at t={t}")
        return val

    def eval_output(self, t: int, x, u) -> np.ndarray:
        val = self.output(t, np.asarray(x, dtype=float), np.asarray(u, dtype=float))
        val = as_vector(val, length=self.p, name="output value")
        if not np.all(np.isfinite(val)):
            raise ValueError(f"output returned non-finite values at t={t}")
        return val

    def transition_batch(self, t: int, states: np.ndarray, u: np.ndarray) -> np.ndarray:
        """f_t over a (k, n) batch of states under one input; returns (k, n)."""
        states = np.asarray(states, dtype=float)
        if self.vectorized:
            out = np.asarray(self.transition(t, states, np.asarray(u, dtype=float)), dtype=float)
            return out.reshape(states.shape[0], self.n)
        return np.stack([self.eval_transition(t, row, u) for row in states])

    def output_batch(self, t: int, states: np.ndarray, u: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        if self.vectorized:
            out = np.asarray(self.output(t, states, np.asarray(u, dtype=float)), dtype=float)
            return out.reshape(states.shape[0], self.p)
        return np.stack([self.eval_output(t, row, u) for row in states])


def _as_records(x, name: str) -> np.ndarray:
    """Coerce a time series to shape (N, dim); 1-D input means dim = 1."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a (N, dim) array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Dataset:
    """Input-output records with known initial state.

    ``true_states``/``true_noise`` are simulation diagnostics; estimation
    never reads them.  ``true_states`` holds x[1..N+1] when produced by
    :func:`simulate` (CSV round trips keep x[1..N] only).
    """

    inputs: np.ndarray
    outputs: np.ndarray
    x1: np.ndarray
    true_states: np.ndarray | None = None
    true_noise: np.ndarray | None = None

    def __post_init__(self):
        inputs = _as_records(self.inputs, "inputs")
        outputs = _as_records(self.outputs, "outputs")
        if inputs.shape[0] != outputs.shape[0]:
            raise ValueError(
                f"inputs ({inputs.shape[0]}) and outputs ({outputs.shape[0]}) "
                "must have the same length"
            )
        if inputs.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        x1 = as_vector(self.x1, name="x1")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)
        object.__setattr__(self, "x1", x1)
        if self.true_states is not None:
            ts = _as_records(self.true_states, "true_states")
            if ts.shape[0] not in (inputs.shape[0], inputs.shape[0] + 1):
                raise ValueError("true_states must cover N or N+1 time steps")
            object.__setattr__(self, "true_states", ts)
        if self.true_noise is not None:
            tn = _as_records(self.true_noise, "true_noise")
            if tn.shape[0] != inputs.shape[0]:
                raise ValueError("true_noise must have one row per time step")
            object.__setattr__(self, "true_noise", tn)

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]


def stacked_eval(model: StateSpaceModel, t: int, x, u) -> np.ndarray:
    """Stacked map ``h_t = [f_t; g_t]`` evaluated at one point."""
    return np.concatenate([model.eval_transition(t, x, u), model.eval_output(t, x, u)])


def residual(model: StateSpaceModel, t: int, x_t, x_next, u_t, y_t) -> np.ndarray:
    """Stacked noise residual ``[x_next; y_t] - h_t(x_t, u_t)``.

    For data produced by :func:`simulate`, this reproduces the recorded
    noise draw exactly.
    """
    xi = np.concatenate([
        as_vector(x_next, length=model.n, name="x_next"),
        as_vector(y_t, length=model.p, name="y_t"),
    ])
    return xi - stacked_eval(model, t, x_t, u_t)


def simulate(
    model: StateSpaceModel,
    noise: truncnorm.NoiseParams,
    inputs,
    x1,
    rng_seed=None,
) -> Dataset:
    """Simulate the system under i.i.d. truncated-Gaussian stacked noise.

    Deterministic for a given ``rng_seed``.  Raises
    :class:`~tgem.errors.DivergenceError` if any state coordinate exceeds
    1e12 in magnitude.
    """
    inputs = _as_records(inputs, "inputs")
    if inputs.shape[1] != model.m:
        raise ValueError(f"inputs must have {model.m} columns, got {inputs.shape[1]}")
    N = inputs.shape[0]
    if N < 1:
        raise ValueError("inputs must be nonempty")
    if noise.dim != model.noise_dim:
        raise ValueError(
            f"noise dimension {noise.dim} does not match n + p = {model.noise_dim}"
        )
    x1 = as_vector(x1, length=model.n, name="x1")

    eta = truncnorm.sample(noise, N, rng_seed=rng_seed)
    states = np.empty((N + 1, model.n))
    outputs = np.empty((N, model.p))
    states[0] = x1
    for t in range(1, N + 1):
        x_t = states[t - 1]
        u_t = inputs[t - 1]
        w_t = eta[t - 1, : model.n]
        v_t = eta[t - 1, model.n:]
        outputs[t - 1] = model.eval_output(t, x_t, u_t) + v_t
        states[t] = model.eval_transition(t, x_t, u_t) + w_t
        if np.max(np.abs(states[t])) > _DIVERGENCE_LIMIT:
            raise DivergenceError(f"state magnitude exceeded {_DIVERGENCE_LIMIT:g} at t={t}")
    return Dataset(inputs=inputs, outputs=outputs, x1=x1,
                   true_states=states, true_noise=eta)


# -- dataset CSV format -----------------------------------------------------
#
# Header: t,u1..um,y1..yp[,x1..xn]; one row per time step t = 1..N; floats
# written with repr (shortest round-trip, >= 15 significant digits).  State
# columns are present only when true states are exported; row t carries x[t],
# so x1 equals the first state row.


def write_dataset_csv(data: Dataset, path, include_states: bool | None = None) -> None:
    """Write a dataset to CSV.  ``include_states=None`` exports states
    whenever the dataset has them."""
    if include_states is None:
        include_states = data.true_states is not None
    if include_states and data.true_states is None:
        raise ValueError("dataset has no true states to export")
    m = data.inputs.shape[1]
    p = data.outputs.shape[1]
    header = ["t"]
    header += [f"u{i}" for i in range(1, m + 1)]
    header += [f"y{i}" for i in range(1, p + 1)]
    if include_states:
        n = data.true_states.shape[1]
        header += [f"x{i}" for i in range(1, n + 1)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(data.n_samples):
            row = [str(t + 1)]
            row += [repr(float(v)) for v in data.inputs[t]]
            row += [repr(float(v)) for v in data.outputs[t]]
            if include_states:
                row += [repr(float(v)) for v in data.true_states[t]]
            writer.writerow(row)


def read_dataset_csv(path, x1=None) -> Dataset:
    """Read a dataset CSV.

    When the file has no state columns, ``x1`` must be supplied; when it
    does, ``x1`` defaults to the first state row.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    if not header or header[0] != "t":
        raise ValueError(f"{path}: expected a 't' column first, got header {header!r}")
    m = sum(1 for name in header if name.startswith("u"))
    p = sum(1 for name in header if name.startswith("y"))
    n = sum(1 for name in header if name.startswith("x"))
    expected = [f"u{i}" for i in range(1, m + 1)] + [f"y{i}" for i in range(1, p + 1)] \
        + [f"x{i}" for i in range(1, n + 1)]
    if header[1:] != expected:
        raise ValueError(f"{path}: malformed header {header!r}")
    data = np.array([[float(v) for v in row[1:]] for row in rows])
    if data.shape[1] != m + p + n:
        raise ValueError(f"{path}: rows disagree with header width")
    inputs = data[:, :m]
    outputs = data[:, m:m + p]
    states = data[:, m + p:] if n else None
    if x1 is None:
        if states is None:
            raise ValueError(f"{path}: no state columns; x1 must be supplied")
        x1 = states[0]
    return Dataset(inputs=inputs, outputs=outputs, x1=x1, true_states=states)
