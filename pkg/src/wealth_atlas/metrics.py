"""Correlation and error metrics shared by the labels and evaluation stages."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def pearson_r(a: Sequence[float], b: Sequence[float]) -> float | None:
    """Sample Pearson correlation; ``None`` when either input has zero variance."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson_r needs two 1-d sequences of equal length")
    if x.size < 2:
        raise ValueError("pearson_r needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def rmse(pred: Sequence[float], truth: Sequence[float]) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ValueError("rmse of empty sequences")
    d = p - t
    return math.sqrt(float(d @ d) / d.size)
