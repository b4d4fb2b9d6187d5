"""Input validation helpers shared by the estimator API and geometry types."""

from __future__ import annotations

import numpy as np


def as_float_array(x, name: str, shape=None) -> np.ndarray:
    """Coerce to a float64 array, checking shape and finiteness."""
    arr = np.asarray(x, dtype=float)
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name}: expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def as_points(x, dim: int, name: str, min_count: int = 0) -> np.ndarray:
    """Coerce to an (n, dim) float array of finite points."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1 and arr.size == dim:
        arr = arr.reshape(1, dim)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"{name}: expected an (n, {dim}) array, got shape {arr.shape}")
    if arr.shape[0] < min_count:
        raise ValueError(f"{name}: need at least {min_count} points, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_positive(name: str, value) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name}: must be positive and finite, got {value!r}")
    return value


def check_finite(name: str, value) -> float:
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"{name}: must be finite, got {value!r}")
    return value


def check_rotation_matrix(R, tol: float = 1e-9, name: str = "rotation") -> np.ndarray:
    """Validate a proper rotation matrix (orthonormal, det +1) within tol."""
    R = as_float_array(R, name, (3, 3))
    err = float(np.abs(R.T @ R - np.eye(3)).max())
    if err > tol:
        raise ValueError(f"{name}: not orthonormal within {tol:g} (max deviation {err:.3e})")
    if np.linalg.det(R) < 0:
        raise ValueError(f"{name}: determinant is negative (reflection, not rotation)")
    return R
