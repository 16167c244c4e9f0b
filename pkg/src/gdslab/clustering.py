"""Pseudo-label assignment for unlabeled target embeddings."""
from __future__ import annotations

from dataclasses import dataclass
import csv

import numpy as np

from . import kernels


class NoUsableClustersError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray  # -1 marks noise
    cluster_count: int

    @property
    def noise_count(self) -> int:
        return int(np.sum(self.labels < 0))


def canonical_labels(labels) -> np.ndarray:
    """Relabel clusters 0..k-1 in order of their smallest member index."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full_like(labels, -1)
    mapping = {}
    for i, lab in enumerate(labels):
        if lab < 0:
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


def dbscan(points, eps: float, min_pts: int) -> ClusterAssignment:
    """Density clustering under the half-Euclidean pair distance.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Both the outer scan and cluster expansion run in index
    order, so border points go to the first cluster that reaches them.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    x = np.asarray(points, dtype=np.float64)
    if x.size == 0:
        return ClusterAssignment(np.zeros(0, dtype=np.int64), 0)
    labels = kernels.dbscan_labels(x, eps, min_pts)
    return ClusterAssignment(labels, int(labels.max()) + 1 if labels.size else 0)


def eps_from_percentile(points, percentile: float = 1.6) -> float:
    """``percentile``-th percentile of all off-diagonal pair distances."""
    x = np.asarray(points, dtype=np.float64)
    dist = kernels.pairwise_half_distances(x, x)
    iu = np.triu_indices(len(x), k=1)
    return float(np.percentile(dist[iu], percentile))


def _inertia(x, centers, labels):
    diff = x - centers[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def kmeans(points, k: int, max_iters: int = 100, seed=0, *, return_history=False):
    """Lloyd's algorithm from a seeded k-means++ start.

    With ``return_history`` the per-iteration inertia list is returned too.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if k < 1 or k > n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers[c] = x[idx]
        closest = np.minimum(closest, np.sum((x - centers[c]) ** 2, axis=1))

    history = []
    labels = None
    for _ in range(max_iters):
        d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)
        history.append(_inertia(x, centers, new_labels))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
    assignment = ClusterAssignment(canonical_labels(labels), int(len(np.unique(labels))))
    return (assignment, history) if return_history else assignment


def pseudo_label_filter(assignment: ClusterAssignment, dataset_indices, min_size: int):
    """Drop noise and clusters smaller than ``min_size``.

    Returns ``(kept dataset indices, contiguous pseudo labels)``.
    """
    labels = np.asarray(assignment.labels, dtype=np.int64)
    idx = np.asarray(dataset_indices, dtype=np.int64)
    if labels.shape != idx.shape:
        raise ValueError("assignment and indices are not aligned")
    valid = labels >= 0
    ids, counts = np.unique(labels[valid], return_counts=True)
    big = ids[counts >= min_size]
    keep = np.isin(labels, big) & valid
    if not keep.any():
        raise NoUsableClustersError("no usable clusters")
    return idx[keep], canonical_labels(labels[keep])


def save_assignment_csv(path, dataset_indices, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "pseudo_label"])
        for i, lab in zip(dataset_indices, labels):
            w.writerow([int(i), int(lab)])
