"""Small input checks shared by the estimators."""

from __future__ import annotations

import numpy as np


def check_scores(scores) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("scores are empty")
    if not np.isfinite(arr).all():
        raise ValueError("scores must be finite")
    return arr


def check_binary_labels(labels, n: int | None = None) -> np.ndarray:
    """Boolean label vector containing both classes."""
    arr = np.asarray(labels).reshape(-1)
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"expected {n} labels, got {arr.shape[0]}")
    uniq = np.unique(arr)
    if not set(uniq.tolist()) <= {0, 1, False, True}:
        raise ValueError("labels must be binary")
    arr = arr.astype(bool)
    if arr.all() or not arr.any():
        raise ValueError("labels must contain both classes")
    return arr


def check_positive(name: str, value: float) -> float:
    value = float(value)
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_layer(layer: int, n_layers: int) -> int:
    layer = int(layer)
    if not 0 <= layer < n_layers:
        raise ValueError(f"layer {layer} out of range [0, {n_layers})")
    return layer
