"""Hot search kernels: top-M selection, cluster scans, k-means assignment.

Each kernel has a pure-numpy implementation and a numba ``@njit``
twin. The active backend is chosen at import time: numba when available,
unless ``QUERYFEED_NUMBA=0`` forces the numpy path. Both backends order
results identically: score descending, then row index ascending (callers
keep rows sorted by item id, so row order is id order).

``benchmarks/bench_kernels.py`` times the two paths against each other.
"""

from __future__ import annotations

import os

import numpy as np


def _numba_requested() -> bool:
    return os.environ.get("QUERYFEED_NUMBA", "1").lower() not in ("0", "false", "off")


NUMBA_AVAILABLE = False
if _numba_requested():
    try:
        from numba import njit, prange

        NUMBA_AVAILABLE = True
    except ImportError:
        NUMBA_AVAILABLE = False

NUMBA_ACTIVE = NUMBA_AVAILABLE


# ----------------------------------------------------------------------
# numpy backend


def top_m_numpy(scores: np.ndarray, m: int) -> np.ndarray:
    """Indices of the m largest scores; ties broken by lower index."""
    m = min(m, scores.shape[0])
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return order[:m].astype(np.int64)


def exact_search_numpy(vectors: np.ndarray, query: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    scores = vectors @ query
    idx = top_m_numpy(scores, m)
    return idx, scores[idx]


def batch_exact_search_numpy(vectors: np.ndarray, queries: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    m = min(m, vectors.shape[0])
    scores = queries @ vectors.T
    nq = queries.shape[0]
    idx = np.empty((nq, m), dtype=np.int64)
    out = np.empty((nq, m), dtype=np.float64)
    for i in range(nq):
        row = top_m_numpy(scores[i], m)
        idx[i] = row
        out[i] = scores[i, row]
    return idx, out


def subset_search_numpy(vectors: np.ndarray, rows: np.ndarray, query: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-m among the given row subset; returns global row indices."""
    if rows.shape[0] == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    scores = vectors[rows] @ query
    m = min(m, rows.shape[0])
    order = np.lexsort((rows, -scores))[:m]
    return rows[order].astype(np.int64), scores[order]


def assign_clusters_numpy(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid per row by squared euclidean; ties pick the lowest."""
    d2 = (
        np.sum(vectors * vectors, axis=1, keepdims=True)
        - 2.0 * (vectors @ centroids.T)
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1).astype(np.int64)


# ----------------------------------------------------------------------
# numba backend

if NUMBA_AVAILABLE:

    @njit(cache=True)
    def _insert_top(best_scores, best_idx, filled, s, i):
        """Insert (s, i) into a descending score / ascending index shortlist."""
        m = best_scores.shape[0]
        if filled == m and s <= best_scores[filled - 1]:
            return filled
        pos = filled if filled < m else m - 1
        while pos > 0 and best_scores[pos - 1] < s:
            if pos < m:
                best_scores[pos] = best_scores[pos - 1]
                best_idx[pos] = best_idx[pos - 1]
            pos -= 1
        best_scores[pos] = s
        best_idx[pos] = i
        return min(filled + 1, m)

    @njit(cache=True)
    def _top_m_nb(scores, m):
        n = scores.shape[0]
        m = min(m, n)
        best_scores = np.empty(m, np.float64)
        best_idx = np.empty(m, np.int64)
        filled = 0
        for i in range(n):
            filled = _insert_top(best_scores, best_idx, filled, scores[i], i)
        return best_idx[:filled]

    @njit(cache=True)
    def _exact_search_nb(vectors, query, m):
        n, d = vectors.shape
        m = min(m, n)
        best_scores = np.empty(m, np.float64)
        best_idx = np.empty(m, np.int64)
        filled = 0
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += vectors[i, j] * query[j]
            filled = _insert_top(best_scores, best_idx, filled, s, i)
        return best_idx[:filled], best_scores[:filled]

    @njit(cache=True, parallel=True)
    def _batch_exact_search_nb(vectors, queries, m):
        nq = queries.shape[0]
        n = vectors.shape[0]
        d = vectors.shape[1]
        m = min(m, n)
        idx = np.empty((nq, m), np.int64)
        out = np.empty((nq, m), np.float64)
        for qi in prange(nq):
            best_scores = np.empty(m, np.float64)
            best_idx = np.empty(m, np.int64)
            filled = 0
            for i in range(n):
                s = 0.0
                for j in range(d):
                    s += vectors[i, j] * queries[qi, j]
                filled = _insert_top(best_scores, best_idx, filled, s, i)
            idx[qi] = best_idx
            out[qi] = best_scores
        return idx, out

    @njit(cache=True)
    def _subset_search_nb(vectors, rows, query, m):
        k = rows.shape[0]
        d = vectors.shape[1]
        m = min(m, k)
        best_scores = np.empty(m, np.float64)
        best_idx = np.empty(m, np.int64)
        filled = 0
        for r in range(k):
            row = rows[r]
            s = 0.0
            for j in range(d):
                s += vectors[row, j] * query[j]
            filled = _insert_top(best_scores, best_idx, filled, s, row)
        return best_idx[:filled], best_scores[:filled]

    @njit(cache=True, parallel=True)
    def _assign_clusters_nb(vectors, centroids):
        n, d = vectors.shape
        c = centroids.shape[0]
        labels = np.empty(n, np.int64)
        for i in prange(n):
            best = 0
            best_d = np.inf
            for k in range(c):
                dist = 0.0
                for j in range(d):
                    diff = vectors[i, j] - centroids[k, j]
                    dist += diff * diff
                if dist < best_d:
                    best_d = dist
                    best = k
            labels[i] = best
        return labels

    def top_m_numba(scores, m):
        return _top_m_nb(np.ascontiguousarray(scores, dtype=np.float64), m)

    def exact_search_numba(vectors, query, m):
        return _exact_search_nb(
            np.ascontiguousarray(vectors, dtype=np.float64),
            np.ascontiguousarray(query, dtype=np.float64),
            m,
        )

    def batch_exact_search_numba(vectors, queries, m):
        return _batch_exact_search_nb(
            np.ascontiguousarray(vectors, dtype=np.float64),
            np.ascontiguousarray(queries, dtype=np.float64),
            m,
        )

    def subset_search_numba(vectors, rows, query, m):
        if rows.shape[0] == 0:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
        return _subset_search_nb(
            np.ascontiguousarray(vectors, dtype=np.float64),
            np.ascontiguousarray(rows, dtype=np.int64),
            np.ascontiguousarray(query, dtype=np.float64),
            m,
        )

    def assign_clusters_numba(vectors, centroids):
        return _assign_clusters_nb(
            np.ascontiguousarray(vectors, dtype=np.float64),
            np.ascontiguousarray(centroids, dtype=np.float64),
        )


# active backend
if NUMBA_ACTIVE:
    top_m = top_m_numba
    exact_search = exact_search_numba
    batch_exact_search = batch_exact_search_numba
    subset_search = subset_search_numba
    assign_clusters = assign_clusters_numba
else:
    top_m = top_m_numpy
    exact_search = exact_search_numpy
    batch_exact_search = batch_exact_search_numpy
    subset_search = subset_search_numpy
    assign_clusters = assign_clusters_numpy


# ----------------------------------------------------------------------
# k-means (drives the IVF index)


def kmeans(vectors: np.ndarray, n_clusters: int, seed: int, max_iters: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """Seeded Lloyd iterations; empty clusters re-seed from the farthest point.

    Returns (centroids, labels).
    """
    n = vectors.shape[0]
    if not 1 <= n_clusters <= n:
        raise ValueError(f"need 1 <= clusters <= {n}, got {n_clusters}")
    rng = np.random.default_rng(seed)
    centroids = vectors[rng.choice(n, size=n_clusters, replace=False)].copy()
    labels = assign_clusters(vectors, centroids)
    for _ in range(max_iters):
        for k in range(n_clusters):
            members = labels == k
            if members.any():
                centroids[k] = vectors[members].mean(axis=0)
            else:
                # farthest point from its current centroid takes over
                dists = np.linalg.norm(vectors - centroids[labels], axis=1)
                far = int(np.argmax(dists))
                centroids[k] = vectors[far]
                labels[far] = k
        new_labels = assign_clusters(vectors, centroids)
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return centroids, labels
