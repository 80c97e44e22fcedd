"""Point-set primitives: farthest point sampling, neighbour queries, local spacing."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientPoints


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def lex_rank(points) -> np.ndarray:
    """Rank of every point in (x, y, z) lexicographic order; depends only on the point values."""
    p = _np(points)
    order = np.lexsort((p[:, 2], p[:, 1], p[:, 0]))
    rank = np.empty(len(p), dtype=np.int64)
    rank[order] = np.arange(len(p))
    return rank


def farthest_point_sampling(points, m: int) -> np.ndarray:
    """Indices of m points chosen greedily by farthest distance.

    Starts from the lexicographically largest point and breaks distance ties by
    lexicographic rank, so the chosen *points* do not depend on input order.
    """
    p = _np(points)
    n = len(p)
    if m > n:
        raise InsufficientPoints(f"cannot sample {m} of {n} points")
    if m <= 0:
        return np.zeros(0, dtype=np.int64)
    rank = lex_rank(p)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = int(np.argmax(rank))
    dist = ((p - p[chosen[0]]) ** 2).sum(1)
    for i in range(1, m):
        best = dist.max()
        cand = np.flatnonzero(dist == best)
        j = cand[np.argmin(rank[cand])] if len(cand) > 1 else cand[0]
        chosen[i] = j
        dist = np.minimum(dist, ((p - p[j]) ** 2).sum(1))
    return chosen


def knn(queries, points, k: int, exclude_self: bool = False):
    """k nearest neighbours of each query among points -> (distances, indices), both (Q, k).

    Neighbours are ordered by distance, ties by lexicographic rank of the neighbour.
    """
    q = _np(queries)
    p = _np(points)
    extra = 1 if exclude_self else 0
    kk = k + extra
    if kk > len(p):
        raise InsufficientPoints(f"need {kk} points for k={k}, have {len(p)}")
    tree = cKDTree(p)
    rank = lex_rank(p)
    kq = min(len(p), kk + 4)
    d, idx = tree.query(q, k=kq)
    d = np.asarray(d, dtype=np.float64).reshape(len(q), kq)
    idx = np.asarray(idx).reshape(len(q), kq)
    out_d = np.empty((len(q), k))
    out_i = np.empty((len(q), k), dtype=np.int64)
    # rows whose ties may continue past the queried candidates get every point within the cut-off
    overflow = (d[:, -1] <= d[:, kk - 1]) & (kq < len(p))
    for r in range(len(q)):
        rd, ri = d[r], idx[r]
        if overflow[r]:
            ri = np.asarray(tree.query_ball_point(q[r], rd[kk - 1] * (1 + 1e-12) + 1e-300), dtype=np.int64)
            rd = np.sqrt(((p[ri] - q[r]) ** 2).sum(1))
        if exclude_self:
            # the query point itself is always a candidate at distance zero
            keep = ri != r
            rd, ri = rd[keep], ri[keep]
        order = np.lexsort((rank[ri], rd))[:k]
        out_d[r] = rd[order]
        out_i[r] = ri[order]
    return out_d, out_i


def kdist(positions, k: int = 4) -> np.ndarray:
    """Mean distance from each point to its k nearest other points."""
    p = _np(positions)
    if len(p) <= k:
        raise InsufficientPoints(f"kdist needs more than k={k} points, got {len(p)}")
    d, _ = knn(p, p, k, exclude_self=True)
    return d.mean(1)


def chamfer(a, b) -> float:
    """Symmetric mean nearest-neighbour distance."""
    a = _np(a)
    b = _np(b)
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(da)) + float(np.mean(db)))
