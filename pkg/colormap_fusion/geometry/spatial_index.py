import logging
from typing import List, Tuple

import numpy as np
from scipy.spatial import cKDTree

from ..errors import EmptyIndex

logger = logging.getLogger(__name__)

# Candidate radii are widened by this relative slack before the exact
# numpy distance decides membership, so kd-tree rounding never drops a point.
_RADIUS_SLACK = 1e-9
_TIE_DEPTH = 8


class SpatialIndex:
    """Exact nearest-neighbor and radius queries over a fixed point set.

    Results are identical to an exhaustive scan: distances are recomputed with
    numpy, nearest-neighbor ties go to the lowest point id and radius results
    are returned in ascending id order.
    """

    def __init__(self, points: np.ndarray):
        self.points = np.array(points, dtype=np.float64).reshape(-1, 3)
        self.points.flags.writeable = False
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def _require_points(self):
        if self._tree is None:
            raise EmptyIndex("spatial index holds no points")

    def nearest_neighbor(self, query: np.ndarray) -> Tuple[int, float]:
        """
        Closest indexed point to a single query

        Args:
            query: 3-vector

        Returns:
            (point id, Euclidean distance)
        """
        ids, dists = self.nearest_many(np.asarray(query, dtype=np.float64).reshape(1, 3))
        return int(ids[0]), float(dists[0])

    def nearest_many(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        self._require_points()
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if q.shape[0] == 0:
            return np.empty(0, dtype=np.int64), np.empty(0)

        k = 2 if len(self) > 1 else 1
        dists, ids = self._tree.query(q, k=k)
        if k == 1:
            ids = ids.reshape(-1, 1)
            dists = dists.reshape(-1, 1)
        best = ids[:, 0].astype(np.int64)

        if k == 2:
            bound = dists[:, 0] * (1.0 + _RADIUS_SLACK) + 1e-300
            tied = np.nonzero(dists[:, 1] <= bound)[0]
            if tied.size:
                best[tied] = self._break_ties(q[tied], bound[tied])

        exact = np.linalg.norm(self.points[best] - q, axis=1)
        return best, exact

    def _break_ties(self, q: np.ndarray, bound: np.ndarray) -> np.ndarray:
        k = min(_TIE_DEPTH, len(self))
        _, ids = self._tree.query(q, k=k)
        exact = np.linalg.norm(self.points[ids] - q[:, None, :], axis=2)
        is_min = exact == exact.min(axis=1, keepdims=True)
        chosen = np.where(is_min, ids, np.iinfo(np.int64).max).min(axis=1)

        # Deeper ties than the batch depth fall back to a full ball query
        if k == _TIE_DEPTH:
            kth = np.linalg.norm(self.points[ids[:, -1]] - q, axis=1)
            for row in np.nonzero(kth <= bound * (1.0 + _RADIUS_SLACK))[0]:
                cand = np.array(sorted(self._tree.query_ball_point(q[row], bound[row])), dtype=np.int64)
                cand_d = np.linalg.norm(self.points[cand] - q[row], axis=1)
                chosen[row] = cand[int(np.argmin(cand_d))]
        return chosen.astype(np.int64)

    def radius_neighbors(self, query: np.ndarray, radius: float) -> List[int]:
        """Ids of indexed points within radius of query, ascending"""
        return self.radius_many(np.asarray(query, dtype=np.float64).reshape(1, 3), radius)[0].tolist()

    def radius_many(self, queries: np.ndarray, radius: float) -> List[np.ndarray]:
        if radius <= 0:
            raise ValueError(f"radius must be positive, got {radius}")
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if self._tree is None:
            return [np.empty(0, dtype=np.int64) for _ in range(q.shape[0])]

        wide = radius * (1.0 + _RADIUS_SLACK)
        candidate_lists = self._tree.query_ball_point(q, wide)
        results = []
        for row, candidates in enumerate(candidate_lists):
            if not candidates:
                results.append(np.empty(0, dtype=np.int64))
                continue
            cand = np.array(sorted(candidates), dtype=np.int64)
            d = np.linalg.norm(self.points[cand] - q[row], axis=1)
            results.append(cand[d <= radius])
        return results
