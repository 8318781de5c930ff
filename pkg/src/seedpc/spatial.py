"""Spatial queries: k-NN, ball query, farthest point sampling, PCA normals.

Nearest-neighbor search is backed by a balanced kd-tree; results are
re-ranked with exact distances so ties always break toward the lower row
index, matching a brute-force scan.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyIndex, InvalidArgument

__all__ = [
    "KdIndex",
    "build_index",
    "knn",
    "ball_query",
    "farthest_point_sample",
    "estimate_normals",
]

# Relative slack when turning a kd-tree distance into an inclusion radius,
# so points whose exact distance equals the bound are never missed.
_TIE_SLACK = 1.0 + 1e-12


def _coords(points) -> np.ndarray:
    if hasattr(points, "positions"):
        points = points.positions
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidArgument(f"points must be 2-D, got shape {arr.shape}")
    return arr


class KdIndex:
    """Immutable kd-tree over an (N, d) point array."""

    __slots__ = ("points", "tree", "n", "dim")

    def __init__(self, points):
        pts = _coords(points).copy()
        if pts.shape[0] < 1:
            raise EmptyIndex("cannot index zero points")
        pts.setflags(write=False)
        self.points = pts
        self.n = pts.shape[0]
        self.dim = pts.shape[1]
        self.tree = cKDTree(pts, balanced_tree=True)


def build_index(points) -> KdIndex:
    return KdIndex(points)


def _query_vector(index: KdIndex, query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise InvalidArgument(f"query has dim {q.shape[0]}, index has dim {index.dim}")
    if not np.all(np.isfinite(q)):
        raise InvalidArgument("query contains NaN or Inf")
    return q


def _rank_candidates(index: KdIndex, q: np.ndarray, cand: np.ndarray):
    """Exact distances for candidate rows, sorted by (distance, row index)."""
    dist = np.linalg.norm(index.points[cand] - q, axis=1)
    order = np.lexsort((cand, dist))
    return cand[order], dist[order]


def knn(index: KdIndex, query, k: int):
    """k nearest rows to ``query``, ties broken by lower row index.

    Returns (indices, distances) of length exactly k; when the index holds
    fewer than k points the nearest row is repeated to pad.
    """
    if k < 1:
        raise InvalidArgument(f"k must be >= 1, got {k}")
    q = _query_vector(index, query)
    kk = min(k, index.n)
    d, _ = index.tree.query(q, k=kk)
    dmax = float(np.max(d)) if kk > 1 else float(d)
    cand = np.asarray(index.tree.query_ball_point(q, r=dmax * _TIE_SLACK), dtype=np.int64)
    idx, dist = _rank_candidates(index, q, cand)
    idx, dist = idx[:kk], dist[:kk]
    if kk < k:
        pad = k - kk
        idx = np.concatenate([idx, np.repeat(idx[0], pad)])
        dist = np.concatenate([dist, np.repeat(dist[0], pad)])
    return idx, dist


def ball_query(index: KdIndex, query, radius: float, k: int):
    """Up to k rows within ``radius`` of ``query``, nearest first.

    Fewer than k hits pad by repeating the first hit; zero hits fall back to
    unconstrained knn.  Returns (indices, distances) of length exactly k.
    """
    if k < 1:
        raise InvalidArgument(f"k must be >= 1, got {k}")
    if radius < 0.0:
        raise InvalidArgument(f"radius must be >= 0, got {radius}")
    q = _query_vector(index, query)
    cand = np.asarray(index.tree.query_ball_point(q, r=radius * _TIE_SLACK), dtype=np.int64)
    if cand.size:
        idx, dist = _rank_candidates(index, q, cand)
        keep = dist <= radius
        idx, dist = idx[keep], dist[keep]
    else:
        idx = dist = np.empty(0)
    if idx.size == 0:
        return knn(index, q, k)
    if idx.size > k:
        idx, dist = idx[:k], dist[:k]
    elif idx.size < k:
        pad = k - idx.size
        idx = np.concatenate([idx, np.repeat(idx[0], pad)]).astype(np.int64)
        dist = np.concatenate([dist, np.repeat(dist[0], pad)])
    return idx, dist


def farthest_point_sample(points, m: int, start) -> np.ndarray:
    """Greedy max-min sampling of m row indexes.

    ``start`` is a row index or a sequence of pre-selected row indexes that
    count toward m.  Each step picks the row maximizing the distance to the
    selected set; ties break toward the lower row index.
    """
    pts = _coords(points)
    n = pts.shape[0]
    starts = np.atleast_1d(np.asarray(start, dtype=np.int64))
    if starts.size < 1:
        raise InvalidArgument("start must name at least one row")
    if starts.min() < 0 or starts.max() >= n:
        raise InvalidArgument("start row out of range")
    if not 1 <= m <= n:
        raise InvalidArgument(f"m must be in [1, {n}], got {m}")
    if starts.size >= m:
        return starts[:m].copy()

    selected = np.empty(m, dtype=np.int64)
    selected[: starts.size] = starts
    # Squared distances preserve the argmax and its tie pattern.
    d2 = np.full(n, np.inf)
    for s in starts:
        d2 = np.minimum(d2, ((pts - pts[s]) ** 2).sum(axis=1))
    for i in range(starts.size, m):
        nxt = int(np.argmax(d2))
        selected[i] = nxt
        d2 = np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return selected


def estimate_normals(points, k: int = 16):
    """Unit normals from PCA over each point's k-NN neighborhood.

    The normal is the eigenvector of the smallest covariance eigenvalue,
    sign-canonicalized (last nonzero component positive).  Neighborhoods of
    rank < 2 get the fallback normal (0, 0, 1) and are flagged.

    Returns (normals (N, 3), degenerate mask (N,)).
    """
    pts = _coords(points)
    if pts.shape[1] != 3:
        raise InvalidArgument("normals are defined for 3-D points")
    n = pts.shape[0]
    if k < 3:
        raise InvalidArgument(f"k must be >= 3, got {k}")
    kk = min(k, n)
    tree = cKDTree(pts)
    _, nbr = tree.query(pts, k=kk)
    nbr = nbr.reshape(n, kk)
    hood = pts[nbr]  # (N, kk, 3)
    centered = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / kk
    evals, evecs = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = evecs[:, :, 0].copy()
    degenerate = evals[:, 1] <= 1e-9 * np.maximum(evals[:, 2], 1e-300)
    degenerate |= evals[:, 2] <= 0.0
    normals[degenerate] = (0.0, 0.0, 1.0)

    # Deterministic orientation: last nonzero component made positive.
    flip = normals[:, 2] < 0
    zero_z = normals[:, 2] == 0
    flip |= zero_z & (normals[:, 1] < 0)
    flip |= zero_z & (normals[:, 1] == 0) & (normals[:, 0] < 0)
    normals[flip] *= -1.0
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals /= np.maximum(norms, 1e-300)
    return normals, degenerate
