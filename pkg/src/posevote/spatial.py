"""Exact 3D nearest-neighbour and fixed-radius search.

The tree itself is scipy's ``cKDTree``; this wrapper pins down the
conventions the rest of the package relies on: closed balls measured with
plain Euclidean distance, results sorted by id, and distance ties broken by
the lower id.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from posevote.geom3d import ContractError

# slack added to tree queries; every candidate is re-checked against the exact distance
_PAD = 1e-9


def _dist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = points - q
    return np.sqrt(np.einsum("ij,ij->i", d, d))


class SpatialIndex:
    """Balanced k-d tree over an immutable ``(n, 3)`` point array."""

    def __init__(self, points):
        pts = np.array(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ContractError(f"expected (n, 3) points, got shape {pts.shape}")
        if len(pts) == 0:
            raise ContractError("cannot index an empty point set")
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def tree(self) -> cKDTree:
        return self._tree

    def radius_search(self, query, radius: float) -> np.ndarray:
        """Ids with ``||point - query|| <= radius``, ascending."""
        if radius < 0:
            raise ContractError("radius must be non-negative")
        q = np.asarray(query, dtype=float)
        cand = np.asarray(self._tree.query_ball_point(q, radius * (1 + _PAD) + _PAD), dtype=np.intp)
        if len(cand) == 0:
            return cand
        keep = cand[_dist(self.points[cand], q) <= radius]
        keep.sort()
        return keep

    def knn(self, query, k: int) -> np.ndarray:
        """The ``k`` nearest ids sorted by distance, ties broken by lower id."""
        n = len(self.points)
        if not 1 <= k <= n:
            raise ContractError(f"k must be in [1, {n}], got {k}")
        q = np.asarray(query, dtype=float)
        dk, _ = self._tree.query(q, k=k)
        kth = float(np.atleast_1d(dk)[-1])
        # everything tied with the k-th distance has to be seen before picking by id
        cand = np.asarray(self._tree.query_ball_point(q, kth * (1 + 1e-7) + _PAD), dtype=np.intp)
        d = _dist(self.points[cand], q)
        order = np.lexsort((cand, d))
        return cand[order[:k]]

    def knn_many(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Batched k-NN (distances, ids) for bulk work where tie order does not matter."""
        n = len(self.points)
        if not 1 <= k <= n:
            raise ContractError(f"k must be in [1, {n}], got {k}")
        d, i = self._tree.query(np.asarray(queries, dtype=float), k=k)
        return np.asarray(d).reshape(-1, k), np.asarray(i).reshape(-1, k)

    def nearest(self, queries, max_distance: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
        """Nearest neighbour of each query; id ``len(self)`` and ``inf`` when none within range."""
        d, i = self._tree.query(np.asarray(queries, dtype=float), k=1, distance_upper_bound=max_distance)
        return np.asarray(d), np.asarray(i)

    def radius_search_many(self, queries, radius: float) -> list[np.ndarray]:
        q = np.asarray(queries, dtype=float)
        raw = self._tree.query_ball_point(q, radius * (1 + _PAD) + _PAD)
        out = []
        for qi, cand in zip(q, raw):
            cand = np.asarray(cand, dtype=np.intp)
            if len(cand):
                cand = cand[_dist(self.points[cand], qi) <= radius]
                cand.sort()
            out.append(cand)
        return out


def build_index(points) -> SpatialIndex:
    return SpatialIndex(points)


def radius_search(index: SpatialIndex, query, radius: float) -> np.ndarray:
    return index.radius_search(query, radius)


def knn(index: SpatialIndex, query, k: int) -> np.ndarray:
    return index.knn(query, k)
