"""Input checks shared by the estimator front end."""
from __future__ import annotations

import math
from collections import defaultdict

import numpy as np
from sklearn.utils.validation import check_array, check_X_y

from .core import DelayTable, QuantizerConfig, quantize_rates


def check_rates(X) -> np.ndarray:
    """Arrival rates (Mbps) as a flat float array; accepts shape (n,) or (n, 1)."""
    arr = check_array(X, ensure_2d=False, dtype=np.float64)
    if arr.ndim == 2:
        if arr.shape[1] != 1:
            raise ValueError(f"expected a single rate column, got {arr.shape[1]} columns")
        arr = arr[:, 0]
    if np.any(arr < 0):
        raise ValueError("arrival rates must be non-negative")
    return arr


def check_delay_samples(X, y) -> tuple[np.ndarray, np.ndarray]:
    """``X`` columns (slice-1 rate Mbps, weight %), ``y`` mean SDU delay in ms."""
    X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
    if X.shape[1] != 2:
        raise ValueError(f"expected columns (rate_mbps, weight_pct), got {X.shape[1]} columns")
    if np.any(X[:, 0] < 0) or np.any(y < 0):
        raise ValueError("rates and delays must be non-negative")
    if np.any(X[:, 1] != np.round(X[:, 1])):
        raise ValueError("weights must be whole percentages")
    return X, y


def delay_table_from_samples(X, y, quant: QuantizerConfig) -> DelayTable:
    """Mean delay per (quantized rate, weight) cell."""
    X, y = check_delay_samples(X, y)
    states = quantize_rates(X[:, 0], quant)
    cells = defaultdict(list)
    for s, w, d in zip(states, X[:, 1].astype(int), y):
        cells[(float(s), int(w))].append(float(d))
    return DelayTable({k: math.fsum(v) / len(v) for k, v in cells.items()})
