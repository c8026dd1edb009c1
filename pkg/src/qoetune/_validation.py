"""Input validation helpers shared by the estimators and the simulator."""

from __future__ import annotations

import math
from numbers import Integral, Real

import numpy as np


def check_positive(value, name: str, *, strict: bool = True) -> float:
    if not isinstance(value, Real) or isinstance(value, bool) or not math.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    if strict and value <= 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    if not strict and value < 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return float(value)


def check_non_negative(value, name: str) -> float:
    return check_positive(value, name, strict=False)


def check_in_range(value, name: str, low: float, high: float, *, low_open: bool = False) -> float:
    value = check_positive(value, name, strict=False) if low >= 0 else float(value)
    if (value <= low if low_open else value < low) or value > high:
        bracket = "(" if low_open else "["
        raise ValueError(f"{name} must lie in {bracket}{low}, {high}], got {value!r}")
    return value


def check_index(value, name: str, size: int) -> int:
    if not isinstance(value, (Integral, np.integer)) or isinstance(value, bool):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if not 0 <= int(value) < size:
        raise ValueError(f"{name} {value} out of range [0, {size})")
    return int(value)


def check_1d(x, name: str, *, min_len: int = 1) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size < min_len:
        raise ValueError(f"{name} needs at least {min_len} values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_rows(X, name: str = "X", *, n_features: int | None = None) -> np.ndarray:
    """Coerce to a 2-D float array of shape (n_samples, n_features)."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if n_features is not None and arr.shape[1] != n_features:
        raise ValueError(f"{name} has {arr.shape[1]} features, expected {n_features}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr
