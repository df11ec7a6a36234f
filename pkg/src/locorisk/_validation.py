"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np

from .tracks import DAYS_PER_SLICE, N_BINS


def check_weeks(X, name="X", allow_empty=False):
    """Float64 ``(n, n_days, 96)`` array of non-negative finite values."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and X.shape == (DAYS_PER_SLICE, N_BINS):
        X = X[None]
    if X.ndim != 3 or X.shape[2] != N_BINS:
        raise ValueError(f"{name} must have shape (n, n_days, {N_BINS}), got {X.shape}")
    if X.shape[1] < 1:
        raise ValueError(f"{name} needs at least one day per row")
    if not allow_empty and X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    if np.any(X < 0):
        raise ValueError(f"{name} contains negative step counts")
    return X


def check_consistent_length(*arrays):
    lengths = {len(a) for a in arrays if a is not None}
    if len(lengths) > 1:
        raise ValueError(f"inconsistent lengths: {sorted(lengths)}")


def check_binary(y, name="y", allow_unknown=False):
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    allowed = {0, 1, -1} if allow_unknown else {0, 1}
    bad = set(np.unique(y).tolist()) - allowed
    if bad:
        raise ValueError(f"{name} has values outside {sorted(allowed)}: {sorted(bad)}")
    return y
