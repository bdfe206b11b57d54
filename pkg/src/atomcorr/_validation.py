"""Input validation helpers shared by the estimators and samplers."""

from __future__ import annotations

import math

import numpy as np


class ConfigurationError(ValueError):
    """Raised when a configuration value violates its contract."""


class DataError(ValueError):
    """Raised for malformed or unusable event data."""


def check_positive(value, name):
    value = float(value)
    if not math.isfinite(value) or value <= 0:
        raise ConfigurationError(f"{name} must be a finite positive number, got {value!r}")
    return value


def check_non_negative(value, name):
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise ConfigurationError(f"{name} must be a finite non-negative number, got {value!r}")
    return value


def check_probability(value, name):
    value = float(value)
    if not (0.0 <= value <= 1.0):
        raise ConfigurationError(f"{name} must lie in [0, 1], got {value!r}")
    return value


def check_vector3(value, name, positive=False):
    arr = np.asarray(value, dtype=float)
    if arr.shape != (3,):
        raise ConfigurationError(f"{name} must have exactly three components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} must be finite")
    if positive and np.any(arr <= 0):
        raise ConfigurationError(f"{name} must be strictly positive, got {arr.tolist()}")
    return tuple(float(v) for v in arr)


def check_points(X, name="X", ncols=3):
    """Coerce ``X`` to a float array of shape (n, ncols)."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, ncols)
    if arr.ndim != 2 or arr.shape[1] != ncols:
        raise DataError(f"{name} must have shape (n, {ncols}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_shots(shots):
    """Validate a sequence of shots: unique ids and time-sorted events."""
    shots = list(shots)
    seen = set()
    for shot in shots:
        if shot.shot_id in seen:
            raise DataError(f"duplicate shot_id {shot.shot_id}")
        seen.add(shot.shot_id)
        if shot.t.size > 1 and np.any(np.diff(shot.t) < 0):
            raise DataError(f"events of shot {shot.shot_id} are not sorted by arrival time")
    return shots
