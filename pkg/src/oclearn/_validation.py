"""Shared input-validation helpers."""

from __future__ import annotations

import numbers

import numpy as np


def as_generator(seed) -> np.random.Generator:
    """Coerce ``seed`` (None, int, SeedSequence or Generator) to a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_feature_matrix(X, *, n_features: int | None = None, name: str = "X") -> np.ndarray:
    """Validate and return a finite 2-D float64 matrix with at least one row."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if n_features is not None and arr.shape[1] != n_features:
        raise ValueError(
            f"{name} has {arr.shape[1]} features, expected {n_features}"
        )
    return arr


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_fraction(value, name: str, *, closed_right: bool = True) -> float:
    v = float(value)
    top_ok = v <= 1.0 if closed_right else v < 1.0
    if not (0.0 <= v and top_ok):
        raise ValueError(f"{name} must lie in [0, 1{']' if closed_right else ')'}, got {value!r}")
    return v


def l2_normalize_rows(X: np.ndarray) -> np.ndarray:
    """Scale each row to unit Euclidean norm; all-zero rows are left as zeros."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return X / safe
