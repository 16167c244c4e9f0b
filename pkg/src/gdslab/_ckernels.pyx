# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Mirrors ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def half_distances(const double[:, ::1] x, const cnp.int64_t[::1] ia,
                   const cnp.int64_t[::1] ib):
    cdef Py_ssize_t m = ia.shape[0], dim = x.shape[1], k, j
    cdef double acc, t
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    for k in range(m):
        acc = 0.0
        for j in range(dim):
            t = x[ia[k], j] - x[ib[k], j]
            acc += t * t
        o[k] = 0.5 * sqrt(acc)
    return out


def pairwise_half_distances(const double[:, ::1] q, const double[:, ::1] g):
    cdef Py_ssize_t nq = q.shape[0], ng = g.shape[0], dim = q.shape[1], i, j, c
    cdef double acc, t
    out = np.empty((nq, ng), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(nq):
        for j in range(ng):
            acc = 0.0
            for c in range(dim):
                t = q[i, c] - g[j, c]
                acc += t * t
            o[i, j] = 0.5 * sqrt(acc)
    return out


def scatter_pair_grad(const double[:, ::1] x, const cnp.int64_t[::1] ia,
                      const cnp.int64_t[::1] ib, const double[::1] d,
                      const double[::1] coef):
    cdef Py_ssize_t n = x.shape[0], dim = x.shape[1], m = ia.shape[0], k, j
    cdef Py_ssize_t a, b
    cdef double w, t
    out = np.zeros((n, dim), dtype=np.float64)
    cdef double[:, ::1] g = out
    for k in range(m):
        if d[k] <= 0.0:
            continue
        w = coef[k] / (4.0 * d[k])
        a = ia[k]
        b = ib[k]
        for j in range(dim):
            t = w * (x[a, j] - x[b, j])
            g[a, j] += t
            g[b, j] -= t
    return out


def dbscan_labels(const double[:, ::1] x, double eps, Py_ssize_t min_pts):
    cdef Py_ssize_t n = x.shape[0], dim = x.shape[1], i, j, c, head, tail, p
    cdef Py_ssize_t cluster = 0, count
    cdef double acc, t
    labels_arr = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels_arr
    cdef cnp.int64_t[::1] labels = labels_arr

    # adjacency as a dense boolean matrix; n is at most a few thousand
    adj_arr = np.zeros((n, n), dtype=np.uint8)
    cdef unsigned char[:, ::1] adj = adj_arr
    core_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] core = core_arr
    visited_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] visited = visited_arr
    queue_arr = np.empty(n * n + n, dtype=np.int64)
    cdef cnp.int64_t[::1] queue = queue_arr

    for i in range(n):
        adj[i, i] = 1
        for j in range(i + 1, n):
            acc = 0.0
            for c in range(dim):
                t = x[i, c] - x[j, c]
                acc += t * t
            if 0.5 * sqrt(acc) <= eps:
                adj[i, j] = 1
                adj[j, i] = 1
    for i in range(n):
        count = 0
        for j in range(n):
            count += adj[i, j]
        core[i] = count >= min_pts

    for i in range(n):
        if visited[i] or not core[i]:
            continue
        visited[i] = 1
        labels[i] = cluster
        head = 0
        tail = 0
        for j in range(n):
            if adj[i, j]:
                queue[tail] = j
                tail += 1
        while head < tail:
            p = queue[head]
            head += 1
            if labels[p] == -1:
                labels[p] = cluster
            if visited[p]:
                continue
            visited[p] = 1
            if core[p]:
                for j in range(n):
                    if adj[p, j]:
                        queue[tail] = j
                        tail += 1
        cluster += 1
    return labels_arr
