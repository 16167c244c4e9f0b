"""Retrieval and threshold evaluation over half-Euclidean distances."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
import csv
import json

import numpy as np

from . import kernels
from .data import enumerate_pairs

TAIL = 0.001
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass
class Separation:
    mean_gap: float
    gap_in_sigmas: float
    empirical_overlap: float


@dataclass
class EvalReport:
    map: float
    cmc: list
    roc_points: list = field(default_factory=list)
    pr_points: list = field(default_factory=list)
    auc: float = float("nan")
    pos_histogram: list = field(default_factory=list)
    neg_histogram: list = field(default_factory=list)
    separation: Separation | None = None
    skipped_queries: int = 0

    @property
    def rank1(self) -> float:
        return self.cmc[0] if self.cmc else float("nan")

    def to_dict(self, with_curves=True) -> dict:
        out = asdict(self)
        out["rank1"] = self.rank1
        if not with_curves:
            for key in ("roc_points", "pr_points", "pos_histogram", "neg_histogram"):
                out.pop(key)
        return out

    def save(self, json_path, csv_prefix=None) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
        if csv_prefix is None:
            return
        _write_rows(f"{csv_prefix}_roc.csv", ["fpr", "tpr"], self.roc_points)
        _write_rows(f"{csv_prefix}_pr.csv", ["recall", "precision"], self.pr_points)
        _write_rows(f"{csv_prefix}_cmc.csv", ["rank", "cmc"],
                    [(k + 1, v) for k, v in enumerate(self.cmc)])
        nb = len(self.pos_histogram)
        _write_rows(f"{csv_prefix}_hist.csv", ["bin_lo", "bin_hi", "pos", "neg"],
                    [(b / nb, (b + 1) / nb, self.pos_histogram[b], self.neg_histogram[b])
                     for b in range(nb)])


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def distance_matrix(queries, gallery) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError("queries and gallery must be 2-D with matching dimension")
    return np.minimum(kernels.pairwise_half_distances(q, g), 1.0)


def cmc_map(distances, query_labels, gallery_labels, exclude_self=False):
    """Mean average precision and CMC curve.

    Gallery items are ranked by ascending distance with ties broken by
    gallery index. Queries without any positive are skipped. Returns
    ``(map, cmc, skipped)``.
    """
    dist = np.asarray(distances, dtype=np.float64)
    ql = np.asarray(query_labels)
    gl = np.asarray(gallery_labels)
    nq, ng = dist.shape
    if ql.shape[0] != nq or gl.shape[0] != ng:
        raise ValueError("labels are not aligned with the distance matrix")
    order = np.argsort(dist, axis=1, kind="stable")
    matches = gl[order] == ql[:, None]
    if exclude_self:
        keep = order != np.arange(nq)[:, None]
        matches = matches[keep].reshape(nq, ng - 1)
    n_cols = matches.shape[1]
    cmc = np.zeros(n_cols)
    aps = []
    skipped = 0
    for row in matches:
        hits = np.flatnonzero(row)
        if hits.size == 0:
            skipped += 1
            continue
        cmc[hits[0]:] += 1
        aps.append(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))
    valid = nq - skipped
    if valid == 0:
        return 0.0, [0.0] * n_cols, skipped
    return float(np.mean(aps)), (cmc / valid).tolist(), skipped


def roc_pr(distances, is_positive):
    """ROC and PR curves for the rule "same identity iff d < theta".

    Thresholds sweep every distinct distance plus sentinels below and above
    the range. Returns ``(roc_points, pr_points, auc)`` with the AUC from the
    trapezoid rule; ROC points run from (0, 0) to (1, 1).
    """
    d = np.asarray(distances, dtype=np.float64).ravel()
    y = np.asarray(is_positive, dtype=bool).ravel()
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_pr needs both positive and negative pairs")
    order = np.argsort(d, kind="stable")
    ds, ys = d[order], y[order]
    # predictions at theta = just above each distinct distance
    last_of_group = np.r_[ds[1:] != ds[:-1], True]
    tp = np.cumsum(ys)[last_of_group]
    fp = np.cumsum(~ys)[last_of_group]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    roc = list(zip(fpr.tolist(), tpr.tolist()))
    precision = tp / (tp + fp)
    pr = [(0.0, 1.0)] + list(zip((tp / n_pos).tolist(), precision.tolist()))
    auc = float(_trapezoid(tpr, fpr))
    return roc, pr, auc


def pair_distances_by_label(embeddings, labels, neg_sample=None, seed=0):
    """All positive and negative pair distances of a labelled embedding set.

    ``neg_sample``: ``None`` keeps all negatives, ``"match"`` subsamples them
    to the positive count, an int subsamples to that many.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    pos, neg = enumerate_pairs(labels)
    d_pos = np.minimum(kernels.half_distances(x, pos[:, 0], pos[:, 1]), 1.0)
    if neg_sample is not None:
        size = len(pos) if neg_sample == "match" else int(neg_sample)
        if size < len(neg):
            rng = np.random.default_rng(seed)
            neg = neg[np.sort(rng.choice(len(neg), size=size, replace=False))]
    d_neg = np.minimum(kernels.half_distances(x, neg[:, 0], neg[:, 1]), 1.0)
    return d_pos, d_neg


def histogram(distances, bins=100):
    d = np.asarray(distances, dtype=np.float64)
    idx = np.minimum((d * bins).astype(np.int64), bins - 1)
    return np.bincount(idx, minlength=bins).tolist()


def distance_histograms(embeddings, labels, bins=100, neg_sample=None, seed=0):
    if len(labels) < 2:
        raise ValueError("need at least two samples")
    d_pos, d_neg = pair_distances_by_label(embeddings, labels, neg_sample, seed)
    return histogram(d_pos, bins), histogram(d_neg, bins)


def separation_metrics(pos_distances, neg_distances) -> Separation:
    """Mean gap, gap in summed standard deviations, and tail overlap.

    The overlap is the fraction of all distances that cross the opposite
    population's 0.1% tail boundary: positives above the negatives' lower
    boundary plus negatives below the positives' upper boundary.
    """
    p = np.asarray(pos_distances, dtype=np.float64)
    n = np.asarray(neg_distances, dtype=np.float64)
    if p.size == 0 or n.size == 0:
        raise ValueError("both distance lists must be non-empty")
    gap = float(n.mean() - p.mean())
    spread = float(p.std() + n.std())
    gap_sigmas = gap / spread if spread > 0 else float("inf") * np.sign(gap)
    pos_hi = np.quantile(p, 1.0 - TAIL)
    neg_lo = np.quantile(n, TAIL)
    crossing = np.sum(p > neg_lo) + np.sum(n < pos_hi)
    return Separation(gap, float(gap_sigmas), float(crossing / (p.size + n.size)))


def evaluate_embeddings(embeddings, labels, bins=100, neg_sample=None, seed=0) -> EvalReport:
    """Full report for a labelled test set: every sample queries all others."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    dist = distance_matrix(x, x)
    m, cmc, skipped = cmc_map(dist, y, y, exclude_self=True)
    d_pos, d_neg = pair_distances_by_label(x, y)
    roc, pr, auc = roc_pr(np.r_[d_pos, d_neg], np.r_[np.ones(d_pos.size, bool), np.zeros(d_neg.size, bool)])
    if neg_sample is not None:
        _, d_neg_hist = pair_distances_by_label(x, y, neg_sample, seed)
    else:
        d_neg_hist = d_neg
    return EvalReport(
        map=m, cmc=cmc, roc_points=roc, pr_points=pr, auc=auc,
        pos_histogram=histogram(d_pos, bins), neg_histogram=histogram(d_neg_hist, bins),
        separation=separation_metrics(d_pos, d_neg), skipped_queries=skipped,
    )
