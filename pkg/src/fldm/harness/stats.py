"""Percentile bootstrap for means and paired differences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Interval:
    mean: float
    lo: float
    hi: float
    n: int

    def excludes_zero(self) -> bool:
        return self.lo > 0.0 or self.hi < 0.0


def bootstrap_mean(values, n_resamples: int = 2000, confidence: float = 0.95, seed: int = 0) -> Interval:
    x = np.asarray(values, dtype=np.float64)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return Interval(float("nan"), float("nan"), float("nan"), 0)
    if x.size == 1:
        v = float(x[0])
        return Interval(v, v, v, 1)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(n_resamples, x.size))
    means = x[idx].mean(axis=1)
    tail = (1.0 - confidence) / 2.0
    lo, hi = np.quantile(means, [tail, 1.0 - tail])
    return Interval(float(x.mean()), float(lo), float(hi), int(x.size))


def bootstrap_paired_difference(a, b, n_resamples: int = 2000, confidence: float = 0.95, seed: int = 0) -> Interval:
    """CI for mean(a - b) resampling matched pairs; pairs with a NaN side are dropped."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    return bootstrap_mean(a - b, n_resamples, confidence, seed)
