"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def as_vector(x, length: int | None = None, name: str = "array") -> np.ndarray:
    """Coerce to a 1-D float array, optionally checking its length."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise ValueError(f"{name} must have length {length}, got {arr.shape[0]}")
    return arr


def as_matrix(x, shape: tuple[int, int] | None = None, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float array, optionally checking its shape."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if shape is not None and arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


def symmetrize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def floor_eigenvalues(mat: np.ndarray, rel_floor: float = 1e-10) -> np.ndarray:
    """Symmetrize and floor eigenvalues at ``rel_floor * trace / dim``.

    Used to repair covariance iterates that Monte Carlo noise pushed slightly
    indefinite.  Leaves already well-conditioned matrices bit-unchanged except
    for the symmetrization.
    """
    sym = symmetrize(mat)
    dim = sym.shape[0]
    floor = rel_floor * max(float(np.trace(sym)), 0.0) / dim
    if floor <= 0.0:
        floor = rel_floor
    vals, vecs = np.linalg.eigh(sym)
    if vals[0] >= floor:
        return sym
    vals = np.maximum(vals, floor)
    return symmetrize((vecs * vals) @ vecs.T)
