"""Exact nearest-neighbour queries and mini-batch sampling for ICP matching."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .geometry import as_cloud


class NnIndex:
    """Exact nearest-neighbour index over a snapshot of a point cloud.

    Ties are broken towards the lowest point index so results are
    reproducible.
    """

    def __init__(self, cloud):
        pts = as_cloud(cloud)
        if pts.shape[0] == 0:
            raise ValueError("cannot index an empty cloud")
        self.points = pts.copy()
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest indexed point for every row of ``queries``.

        Returns ``(indices, distances)``.
        """
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        n = len(self)
        if n == 1:
            dist = np.linalg.norm(q - self.points[0], axis=1)
            return np.zeros(q.shape[0], dtype=np.intp), dist
        dist, idx = self._tree.query(q, k=2)
        best_d, best_i = dist[:, 0], idx[:, 0].copy()
        tied = np.flatnonzero(dist[:, 1] == best_d)
        for row in tied:
            # more than two candidates may share the distance
            cand = self._tree.query_ball_point(q[row], best_d[row] * (1 + 1e-12) + 1e-300)
            cand = np.asarray(cand, dtype=np.intp)
            d = np.linalg.norm(self.points[cand] - q[row], axis=1)
            best_i[row] = cand[d == d.min()].min()
            best_d[row] = d.min()
        return best_i.astype(np.intp), best_d


def build_index(cloud) -> NnIndex:
    return NnIndex(cloud)


def nearest(index: NnIndex, query) -> tuple[np.ndarray, int, float]:
    """Return ``(point, index_in_cloud, distance)`` for a single query."""
    idx, dist = index.query(np.asarray(query, dtype=float).reshape(1, 3))
    i = int(idx[0])
    return index.points[i].copy(), i, float(dist[0])


def sample_minibatch(cloud, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` distinct points drawn uniformly without replacement."""
    pts = np.asarray(cloud, dtype=float)
    if not 1 <= m <= pts.shape[0]:
        raise ValueError(f"mini-batch size {m} outside [1, {pts.shape[0]}]")
    return pts[rng.choice(pts.shape[0], size=m, replace=False)]


def minibatch_schedule(k: int, k_max: int, n_ref: int) -> int:
    """Mini-batch ramp ``n_ref * min(k, 2 k_max / 3) / (2 k_max / 3)``.

    Clamped to ``[1, n_ref]``; the raw ramp is zero at ``k = 0``.
    """
    if n_ref < 1:
        raise ValueError("n_ref must be >= 1")
    ramp = 2.0 * k_max / 3.0
    if ramp <= 0:
        return n_ref
    m = int(np.floor(n_ref * min(k, ramp) / ramp + 0.5))
    return max(1, min(n_ref, m))
