"""Metric-learning losses with analytic gradients w.r.t. batch embeddings.

Distances are half Euclidean norms between unit vectors, so every pair
distance lies in ``[0, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from . import kernels
from .stats import (
    VARIANCE_FLOOR,
    BatchMoments,
    GaussianStats,
    batch_moments,
    momentum_update,
)

UNIT_TOL = 1e-6


class DegenerateBatchError(ValueError):
    """A batch lacks positive or negative pairs, so GDS-H is undefined for it."""


@dataclass(frozen=True)
class LossConfig:
    lambda_h: float = 0.5
    lambda_sigma: float = 1.0
    kappa: float = 3.0

    def __post_init__(self):
        for name in ("lambda_h", "lambda_sigma", "kappa"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.kappa == 0:
            raise ValueError("kappa must be > 0")


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray
    parts: dict = field(default_factory=dict)


def softplus(x):
    """``ln(1 + exp(x))`` without overflow for large ``|x|``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))
    return float(out) if out.ndim == 0 else out


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def pair_distance(x1, x2) -> float:
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    for v in (x1, x2):
        if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
            raise ValueError("pair_distance requires unit-norm vectors")
    return float(min(0.5 * np.linalg.norm(x1 - x2), 1.0))


def gds_loss(pos: GaussianStats, neg: GaussianStats, cfg: LossConfig) -> float:
    return softplus(pos.mean - neg.mean) + cfg.lambda_sigma * (pos.variance + neg.variance)


def hard_mining_loss(pos: GaussianStats, neg: GaussianStats, cfg: LossConfig) -> float:
    return softplus((pos.mean + cfg.kappa * pos.std) - (neg.mean - cfg.kappa * neg.std))


def _as_pairs(pairs):
    p = np.asarray(pairs, dtype=np.int64)
    return p.reshape(-1, 2)


def gds_h_loss(embeddings, pos_pairs, neg_pairs, pos_stats: GaussianStats,
               neg_stats: GaussianStats, cfg: LossConfig, *, hard_mining: bool = True):
    """GDS(-H) loss on the post-update global statistics.

    The pre-update statistics are constants of the step; the gradient flows
    through the ``(1 - beta)``-weighted local moments into each pair distance
    and from there into the embeddings. With ``hard_mining=False`` only the
    plain GDS term is used (equivalent to ``lambda_h = 0``).

    Returns ``(LossOutput, new_pos_stats, new_neg_stats)``.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    pp, nn = _as_pairs(pos_pairs), _as_pairs(neg_pairs)
    if len(pp) == 0 or len(nn) == 0:
        raise DegenerateBatchError("degenerate batch: need positive and negative pairs")
    if pp.min() < 0 or nn.min() < 0 or max(pp.max(), nn.max()) >= len(x):
        raise IndexError("pair index out of range")

    d_pos = np.minimum(kernels.half_distances(x, pp[:, 0], pp[:, 1]), 1.0)
    d_neg = np.minimum(kernels.half_distances(x, nn[:, 0], nn[:, 1]), 1.0)
    m_pos = batch_moments(d_pos, pos_stats.mean)
    m_neg = batch_moments(d_neg, neg_stats.mean)
    new_pos = momentum_update(pos_stats, m_pos)
    new_neg = momentum_update(neg_stats, m_neg)

    lam_h = cfg.lambda_h if hard_mining else 0.0
    gap = new_pos.mean - new_neg.mean
    l_gds = gds_loss(new_pos, new_neg, cfg)
    l_h = hard_mining_loss(new_pos, new_neg, cfg)
    value = l_gds + lam_h * l_h

    s_gap = sigmoid(gap)
    s_h = sigmoid((new_pos.mean + cfg.kappa * new_pos.std) - (new_neg.mean - cfg.kappa * new_neg.std))
    dl_dmean_pos = s_gap + lam_h * s_h
    dl_dmean_neg = -dl_dmean_pos
    dl_dvar_pos = cfg.lambda_sigma + lam_h * s_h * cfg.kappa / (2.0 * new_pos.std)
    dl_dvar_neg = cfg.lambda_sigma + lam_h * s_h * cfg.kappa / (2.0 * new_neg.std)

    coef_pos = _distance_coefficients(d_pos, pos_stats, m_pos, dl_dmean_pos, dl_dvar_pos)
    coef_neg = _distance_coefficients(d_neg, neg_stats, m_neg, dl_dmean_neg, dl_dvar_neg)
    grad = kernels.scatter_pair_grad(
        x,
        np.concatenate([pp[:, 0], nn[:, 0]]),
        np.concatenate([pp[:, 1], nn[:, 1]]),
        np.concatenate([d_pos, d_neg]),
        np.concatenate([coef_pos, coef_neg]),
    )
    parts = {"gds": l_gds, "hard": l_h}
    return LossOutput(float(value), grad, parts), new_pos, new_neg


def _distance_coefficients(d, prior: GaussianStats, moments: BatchMoments,
                           dl_dmean: float, dl_dvar: float) -> np.ndarray:
    """dL/dd_i for one population, through its (1 - beta)-weighted local moments."""
    w = 1.0 - prior.momentum
    raw_var = prior.momentum * prior.variance + w * moments.local_variance
    if raw_var < VARIANCE_FLOOR:
        dl_dvar = 0.0
    n = moments.pair_count
    return w * (dl_dmean / n + dl_dvar * 2.0 * (d - prior.mean) / n)


def triplet_batch_hard(embeddings, labels) -> LossOutput:
    """Soft-margin batch-hard triplet loss, averaged over anchors that have a
    positive. Ties in the hardest positive/negative go to the lowest index."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if len(np.unique(y)) < 2:
        raise ValueError("triplet_batch_hard needs at least two identities in the batch")
    dist = kernels.pairwise_half_distances(x, x)
    same = y[:, None] == y[None, :]
    pos_mask = same & ~np.eye(len(y), dtype=bool)
    anchors = np.flatnonzero(pos_mask.any(axis=1))
    if anchors.size == 0:
        raise ValueError("triplet_batch_hard needs an identity with two samples")

    hardest_pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)[anchors]
    hardest_neg = np.argmin(np.where(same, np.inf, dist), axis=1)[anchors]
    margin = dist[anchors, hardest_pos] - dist[anchors, hardest_neg]
    value = float(np.mean(softplus(margin)))

    s = sigmoid(margin) / anchors.size
    grad = kernels.scatter_pair_grad(
        x,
        np.concatenate([anchors, anchors]),
        np.concatenate([hardest_pos, hardest_neg]),
        np.concatenate([dist[anchors, hardest_pos], dist[anchors, hardest_neg]]),
        np.concatenate([s, -s]),
    )
    return LossOutput(value, grad)


def cross_entropy(logits, labels) -> LossOutput:
    """Mean softmax cross-entropy; accepts a single logit vector or a batch."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != z.shape[0]:
        raise ValueError("one label per logit row required")
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise ValueError("label index out of range")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - log_norm[:, None]
    rows = np.arange(z.shape[0])
    value = float(-logp[rows, y].mean())
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad /= z.shape[0]
    return LossOutput(value, grad[0] if single else grad)
