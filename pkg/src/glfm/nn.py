"""Exact Euclidean k-nearest-neighbour queries.

Low-dimensional data goes through a k-d tree (scipy's ``cKDTree``); above
``KDTREE_MAX_DIM`` dimensions a blocked linear scan is used.  Either way the
final candidates are re-ranked with directly computed distances and ties are
broken by the smaller original index, so results are deterministic and equal
to a brute-force scan.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

KDTREE_MAX_DIM = 20
_BLOCK = 256


def _exact_dist(vectors, idx, queries):
    diff = vectors[idx] - queries[:, None, :]
    return np.sqrt(np.einsum("qkd,qkd->qk", diff, diff))


def _rank(idx, dist, k):
    """Sort each row by (distance, index) and keep the first ``k``."""
    order = np.lexsort((idx, dist), axis=-1)
    idx = np.take_along_axis(idx, order, axis=-1)[:, :k]
    dist = np.take_along_axis(dist, order, axis=-1)[:, :k]
    return idx, dist


class NnIndex:
    """Immutable exact nearest-neighbour index over N vectors of dimension D."""

    def __init__(self, vectors):
        vecs = np.array(vectors, dtype=np.float64)
        if vecs.ndim == 1:
            raise ValueError("build_index expects a sequence of vectors, got a flat array")
        if vecs.ndim != 2:
            raise ValueError("vectors must share one dimension")
        if vecs.shape[0] == 0:
            raise ValueError("cannot build an index over zero vectors")
        if vecs.shape[1] == 0:
            raise ValueError("vector dimension must be >= 1")
        if not np.all(np.isfinite(vecs)):
            raise ValueError("vectors contain non-finite entries")
        vecs.flags.writeable = False
        self.vectors = vecs
        self.dimension = vecs.shape[1]
        self._sqnorm = np.einsum("nd,nd->n", vecs, vecs)
        self._tree = cKDTree(vecs) if self.dimension <= KDTREE_MAX_DIM else None

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def uses_tree(self) -> bool:
        return self._tree is not None

    def query(self, queries, k: int = 1):
        """Batch query; returns ``(indices, distances)`` of shape (Q, k)."""
        q = np.asarray(queries, dtype=np.float64)
        single = q.ndim == 1
        q = np.atleast_2d(q)
        if q.shape[1] != self.dimension:
            raise ValueError(f"query dimension {q.shape[1]} != index dimension {self.dimension}")
        n = len(self)
        if k < 1 or k > n:
            raise ValueError(f"k={k} must be between 1 and the index size {n}")
        if q.shape[0] == 0:
            return np.empty((0, k), np.int64), np.empty((0, k))
        if self._tree is not None:
            idx, dist = self._query_tree(q, k)
        else:
            idx, dist = self._query_scan(q, k)
        if single:
            return idx[0], dist[0]
        return idx, dist

    def _query_tree(self, q, k):
        n = len(self)
        kk = min(n, k + 1)
        _, cand = self._tree.query(q, k=kk)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(q), kk)
        dist = _exact_dist(self.vectors, cand, q)
        idx, dist = _rank(cand, dist, kk)
        if kk == k:
            return idx, dist
        # The (k+1)-th candidate bounds every point left out; a near tie with
        # the k-th distance means an excluded point might beat it on index.
        kth = dist[:, k - 1]
        bound = dist[:, k]
        ambiguous = np.flatnonzero(bound - kth <= 1e-9 * np.maximum(kth, 1.0))
        idx, dist = idx[:, :k].copy(), dist[:, :k].copy()
        for row in ambiguous:
            r = kth[row] * (1 + 1e-9) + 1e-12
            members = np.asarray(self._tree.query_ball_point(q[row], r), dtype=np.int64)
            d = _exact_dist(self.vectors, members[None, :], q[row:row + 1])
            i2, d2 = _rank(members[None, :], d, k)
            idx[row], dist[row] = i2[0], d2[0]
        return idx, dist

    def _query_scan(self, q, k):
        n = len(self)
        out_idx = np.empty((len(q), k), np.int64)
        out_dist = np.empty((len(q), k))
        for start in range(0, len(q), _BLOCK):
            qb = q[start:start + _BLOCK]
            qn = np.einsum("qd,qd->q", qb, qb)
            approx = qn[:, None] + self._sqnorm[None, :] - 2.0 * (qb @ self.vectors.T)
            tol = 1e-9 * (qn[:, None] + self._sqnorm.max()) + 1e-12
            part = np.argpartition(approx, k - 1, axis=1)[:, :k]
            kth = np.take_along_axis(approx, part, axis=1).max(axis=1)
            inside = np.count_nonzero(approx <= (kth + tol[:, 0])[:, None], axis=1)
            # rows whose tolerance band holds exactly k candidates are settled
            clear = np.flatnonzero(inside == k)
            if len(clear):
                d = _exact_dist(self.vectors, part[clear], qb[clear])
                i2, d2 = _rank(part[clear], d, k)
                out_idx[start + clear], out_dist[start + clear] = i2, d2
            for r in np.flatnonzero(inside != k):
                members = np.flatnonzero(approx[r] <= kth[r] + tol[r, 0])
                d = _exact_dist(self.vectors, members[None, :], qb[r:r + 1])
                i2, d2 = _rank(members[None, :], d, k)
                out_idx[start + r], out_dist[start + r] = i2[0], d2[0]
        return out_idx, out_dist


def build_index(vectors) -> NnIndex:
    return NnIndex(vectors)


def knn(index: NnIndex, query, k: int = 1):
    """The ``k`` nearest stored vectors as ``[(original index, distance), ...]``."""
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise ValueError("knn takes a single query vector; use NnIndex.query for batches")
    idx, dist = index.query(q, k)
    return [(int(i), float(d)) for i, d in zip(idx, dist)]


def nearest_distance(index: NnIndex, queries) -> np.ndarray:
    """Distance from every query row to its nearest stored vector."""
    return index.query(np.atleast_2d(queries), 1)[1][:, 0]
