"""Pure numpy implementations of the hot kernels.

These are the reference fallback for ``_ckernels`` and must stay
numerically interchangeable with it (same tie-breaks, same ordering).
"""
from collections import deque

import numpy as np

_ROW_CHUNK = 256


def half_distances(x, ia, ib):
    """Half Euclidean distance ``0.5 * ||x[ia] - x[ib]||`` for each index pair."""
    diff = x[ia] - x[ib]
    return 0.5 * np.sqrt(np.einsum("ij,ij->i", diff, diff))


def pairwise_half_distances(q, g):
    """Dense ``(len(q), len(g))`` half-distance matrix.

    Differences are formed explicitly (row-chunked) rather than through the
    ``|a|^2 + |b|^2 - 2ab`` expansion, which loses precision near zero.
    """
    out = np.empty((q.shape[0], g.shape[0]), dtype=np.float64)
    for start in range(0, q.shape[0], _ROW_CHUNK):
        block = q[start:start + _ROW_CHUNK, None, :] - g[None, :, :]
        out[start:start + _ROW_CHUNK] = 0.5 * np.sqrt(np.einsum("ijk,ijk->ij", block, block))
    return out


def scatter_pair_grad(x, ia, ib, d, coef):
    """Gradient of ``sum_k coef[k] * d_k`` w.r.t. the rows of ``x``.

    ``d_k = 0.5 * ||x[ia[k]] - x[ib[k]]||``, so the pair contributes
    ``coef[k] * (x_a - x_b) / (4 d_k)`` to row ``a`` and the negation to row
    ``b``. Coincident pairs (``d_k == 0``) contribute nothing.
    """
    n = x.shape[0]
    safe = d > 0.0
    w = np.zeros(d.shape[0], dtype=np.float64)
    w[safe] = coef[safe] / (4.0 * d[safe])
    # sum_{pairs} w (x_a - x_b) on a, w (x_b - x_a) on b  ==  (diag(W1) - W) x
    wmat = np.zeros((n, n), dtype=np.float64)
    np.add.at(wmat, (ia, ib), w)
    wmat = wmat + wmat.T
    return wmat.sum(axis=1)[:, None] * x - wmat @ x


def region_query_lists(x, eps):
    """Neighbour index arrays (ascending, self included) within ``eps``."""
    dist = pairwise_half_distances(x, x)
    return [np.flatnonzero(row <= eps) for row in dist]


def dbscan_labels(x, eps, min_pts):
    """Canonical DBSCAN: outer loop and expansion both in index order."""
    n = x.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    neighbours = region_query_lists(x, eps)
    is_core = np.array([len(nb) >= min_pts for nb in neighbours], dtype=bool)
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not is_core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        queue = deque(neighbours[i].tolist())
        while queue:
            j = queue.popleft()
            if labels[j] == -1:
                labels[j] = cluster
            if visited[j]:
                continue
            visited[j] = True
            if is_core[j]:
                queue.extend(neighbours[j].tolist())
        cluster += 1
    return labels
