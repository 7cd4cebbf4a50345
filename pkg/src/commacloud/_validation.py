"""Small argument checks shared by the estimators and pipeline stages."""

from __future__ import annotations

import numbers

import numpy as np

from .exceptions import PreconditionError


def check_probability(value, name: str, open_interval: bool = False) -> float:
    value = float(value)
    if open_interval:
        ok = 0.0 < value < 1.0
    else:
        ok = 0.0 <= value <= 1.0
    if not ok or np.isnan(value):
        bounds = "(0, 1)" if open_interval else "[0, 1]"
        raise PreconditionError(f"{name} must lie in {bounds}, got {value}")
    return value


def check_range(value, name: str, lo: float, hi: float) -> float:
    value = float(value)
    if not lo <= value <= hi:
        raise PreconditionError(f"{name} must lie in [{lo}, {hi}], got {value}")
    return value


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value <= 0:
        raise PreconditionError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.int64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise PreconditionError(f"boxes must have shape (n, 3), got {arr.shape}")
    if (arr[:, 2] <= 0).any():
        raise PreconditionError("box sides must be positive")
    return arr


def check_matrix(X, name: str = "X", n_features: int | None = None) -> np.ndarray:
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise PreconditionError(f"{name} must be 2-D, got {arr.ndim}-D")
    if n_features is not None and arr.shape[1] != n_features:
        raise PreconditionError(f"{name} has {arr.shape[1]} features, expected {n_features}")
    if not np.isfinite(arr).all():
        raise PreconditionError(f"{name} contains non-finite values")
    return arr


def check_binary_labels(y, n: int | None = None) -> np.ndarray:
    arr = np.asarray(y).astype(np.int64).ravel()
    if n is not None and len(arr) != n:
        raise PreconditionError(f"expected {n} labels, got {len(arr)}")
    if not np.isin(arr, (0, 1)).all():
        raise PreconditionError("labels must be 0 or 1")
    return arr
