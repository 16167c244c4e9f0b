"""Momentum-maintained Gaussian statistics of pair-distance populations.

Two instances are kept during adaptation: one for same-identity (positive)
pair distances and one for different-identity (negative) pair distances.
Each batch contributes its local moments through an exponential moving
average, with the local variance measured around the *global* mean held
before the update.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
import math

import numpy as np

INIT_MEAN = 0.5
INIT_VARIANCE = 1.0 / 6.0
VARIANCE_FLOOR = 1e-12


class EmptyBatchError(ValueError):
    """Raised when a batch supplies no pair distances."""


@dataclass(frozen=True)
class GaussianStats:
    mean: float = INIT_MEAN
    variance: float = INIT_VARIANCE
    momentum: float = 0.99
    count_seen: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not (math.isfinite(self.mean) and math.isfinite(self.variance)):
            raise ValueError("mean and variance must be finite")
        if self.variance < 0.0:
            raise ValueError(f"variance must be >= 0, got {self.variance}")

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "var": self.variance}


@dataclass(frozen=True)
class BatchMoments:
    local_mean: float
    local_variance: float
    pair_count: int


def batch_moments(distances, global_mean: float) -> BatchMoments:
    """Local mean of ``distances`` and their mean squared deviation from
    ``global_mean`` (not from the local mean)."""
    d = np.asarray(distances, dtype=np.float64).ravel()
    if d.size == 0:
        raise EmptyBatchError("no pairs in batch")
    if d.min() < 0.0 or d.max() > 1.0:
        raise ValueError("pair distances must lie in [0, 1]")
    dev = d - global_mean
    return BatchMoments(float(d.mean()), float(np.mean(dev * dev)), int(d.size))


def momentum_update(stats: GaussianStats, moments: BatchMoments) -> GaussianStats:
    b = stats.momentum
    mean = b * stats.mean + (1.0 - b) * moments.local_mean
    variance = b * stats.variance + (1.0 - b) * moments.local_variance
    return replace(
        stats,
        mean=mean,
        variance=max(variance, VARIANCE_FLOOR),
        count_seen=stats.count_seen + 1,
    )


def pooled_oracle(set_a, set_b) -> tuple[float, float]:
    """Exact two-pass mean and population variance of the union of two sets."""
    a = np.asarray(set_a, dtype=np.float64).ravel()
    b = np.asarray(set_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise EmptyBatchError("both sets must be non-empty")
    c = np.concatenate([a, b])
    mean = c.sum() / c.size
    return float(mean), float(np.sum((c - mean) ** 2) / c.size)


def snapshot(pos: GaussianStats, neg: GaussianStats, step: int) -> dict:
    """JSON-ready record of both distributions at a training step."""
    return {"pos": pos.to_dict(), "neg": neg.to_dict(), "beta": pos.momentum, "step": int(step)}
