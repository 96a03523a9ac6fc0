"""k-d tree nearest-neighbour index with deterministic tie-breaking."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidArgument


class SpatialIndex:
    """k-d tree over a fixed set of positions.

    Point ids are row indices into ``points``. Queries return neighbours
    sorted by distance, with equal distances ordered by lower id.
    """

    def __init__(self, points: np.ndarray):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        self.points = pts.reshape(-1, 3) if pts.ndim == 1 else pts
        self.count = len(self.points)
        if self.count:
            self.bounds = (self.points.min(axis=0), self.points.max(axis=0))
            self._tree = cKDTree(self.points)
        else:
            dim = self.points.shape[1]
            self.bounds = (np.full(dim, np.nan), np.full(dim, np.nan))
            self._tree = None

    def __len__(self) -> int:
        return self.count

    def knn(self, query, k: int):
        """Return ``(ids, distances)`` of the k nearest points to ``query``."""
        if k < 1 or k > self.count:
            raise InvalidArgument(f"k={k} outside [1, {self.count}]")
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        dist, idx = self._tree.query(q, k=k)
        dist = np.atleast_1d(dist)
        kth = dist[-1]
        # gather every point at distance <= kth so ties resolve by id, not tree order
        cand = np.asarray(self._tree.query_ball_point(q, r=kth * (1 + 1e-12) + 1e-300), dtype=np.intp)
        if len(cand) < k:
            cand = np.union1d(cand, np.atleast_1d(idx)).astype(np.intp)
        d = np.linalg.norm(self.points[cand] - q, axis=1)
        order = np.lexsort((cand, d))[:k]
        return cand[order], d[order]

    def query_many(self, queries: np.ndarray, k: int):
        """Vectorised k-NN for many queries; returns (distances, ids), each (m, k).

        Ties are ordered by the k-d tree rather than by id; use :meth:`knn`
        where exact tie-breaking matters.
        """
        if k < 1 or k > self.count:
            raise InvalidArgument(f"k={k} outside [1, {self.count}]")
        dist, idx = self._tree.query(np.asarray(queries, dtype=np.float64), k=k)
        if k == 1:
            dist = dist[:, None]
            idx = idx[:, None]
        return dist, idx

    def nearest(self, queries: np.ndarray) -> np.ndarray:
        """Id of the nearest indexed point for every query, ties to lower id."""
        queries = np.asarray(queries, dtype=np.float64)
        if self.count == 0:
            raise InvalidArgument("index is empty")
        dist, idx = self._tree.query(queries, k=1)
        out = np.asarray(idx, dtype=np.intp).copy()
        # check the rare tie cases explicitly
        ball = self._tree.query_ball_point(queries, r=dist * (1 + 1e-12) + 1e-300)
        for i, cands in enumerate(ball):
            if len(cands) > 1:
                cands = np.asarray(cands)
                d = np.linalg.norm(self.points[cands] - queries[i], axis=1)
                out[i] = cands[d <= d.min()].min()
        return out

    def radius(self, query, r: float) -> np.ndarray:
        return np.sort(np.asarray(self._tree.query_ball_point(np.asarray(query, dtype=np.float64), r=r), dtype=np.intp))

    def radius_many(self, queries: np.ndarray, r: float) -> list:
        """Sorted ids within distance ``r`` (inclusive) of each query."""
        if self.count == 0:
            return [np.zeros(0, dtype=np.intp) for _ in range(len(queries))]
        balls = self._tree.query_ball_point(np.asarray(queries, dtype=np.float64), r=r)
        return [np.sort(np.asarray(b, dtype=np.intp)) for b in balls]


def knn(index: SpatialIndex, query, k: int):
    return index.knn(query, k)
