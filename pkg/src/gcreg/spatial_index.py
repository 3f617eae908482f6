"""Exact k-nearest-neighbour search from sample points to Gaussian centres.

A k-d tree proposes a few extra candidates per query; distances are then
recomputed with the same arithmetic as the brute-force oracle and ordered by
``(distance, index)``. Rows whose candidate list cannot prove the k-th
neighbour (a tie running past the candidate margin) are resolved by brute
force, so the result is always identical to :func:`brute_force_knn`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError

_MARGIN = 4


@dataclass(frozen=True, eq=False)
class NeighborList:
    indices: np.ndarray    # (m, k) int, ascending distance, ties by index
    distances: np.ndarray  # (m, k) mm

    @property
    def query_count(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("GDIR_THREADS", "1")))
    except ValueError:
        return 1


def _distances(queries, centers, idx):
    d = queries[:, None, :] - centers[idx]
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def _order(idx, dist, k):
    # sort candidates by index first so the stable distance sort breaks ties by index
    pre = np.argsort(idx, axis=1, kind="stable")
    idx = np.take_along_axis(idx, pre, 1)
    dist = np.take_along_axis(dist, pre, 1)
    o = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return np.take_along_axis(idx, o, 1), np.take_along_axis(dist, o, 1)


def brute_force_knn(centers, queries, k: int) -> NeighborList:
    """O(n*m) reference search; ties broken by ascending centre index."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    k = min(int(k), len(centers))
    out_i = np.empty((len(queries), k), dtype=np.intp)
    out_d = np.empty((len(queries), k))
    all_idx = np.arange(len(centers))
    step = max(1, 2_000_000 // max(len(centers), 1))
    for s in range(0, len(queries), step):
        q = queries[s:s + step]
        idx = np.broadcast_to(all_idx, (len(q), len(centers)))
        dist = _distances(q, centers, idx)
        o = np.argsort(dist, axis=1, kind="stable")[:, :k]
        out_i[s:s + step] = o
        out_d[s:s + step] = np.take_along_axis(dist, o, 1)
    return NeighborList(out_i, out_d)


class SpatialIndex:
    """Immutable exact-KNN index over a fixed set of centres."""

    def __init__(self, centers):
        centers = np.array(centers, dtype=np.float64).reshape(-1, 3)
        if len(centers) == 0:
            raise ValidationError("spatial index needs at least one centre")
        if not np.all(np.isfinite(centers)):
            raise ValidationError("spatial index centres must be finite")
        centers.flags.writeable = False
        self.centers = centers
        self._tree = cKDTree(centers)

    @property
    def n(self) -> int:
        return len(self.centers)

    def knn(self, queries, k: int) -> NeighborList:
        if k < 1:
            raise ValidationError(f"k must be >= 1, got {k}")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(int(k), self.n)
        kq = min(k + _MARGIN, self.n)
        _, cand = self._tree.query(queries, k=kq, workers=_workers())
        cand = np.asarray(cand, dtype=np.intp).reshape(len(queries), kq)
        dist = _distances(queries, self.centers, cand)
        idx, d = _order(cand, dist, kq)
        if kq < self.n:
            # the k-th neighbour is proven only if a strictly larger candidate exists
            far = d[:, -1]
            kth = d[:, k - 1]
            unsure = ~(far > kth * (1 + 1e-12) + 1e-300)
            if np.any(unsure):
                exact = brute_force_knn(self.centers, queries[unsure], k)
                idx = idx[:, :k].copy()
                d = d[:, :k].copy()
                idx[unsure] = exact.indices
                d[unsure] = exact.distances
                return NeighborList(idx, d)
        return NeighborList(idx[:, :k], d[:, :k])


def build_index(centers) -> SpatialIndex:
    return SpatialIndex(centers)


def knn(index: SpatialIndex, queries, k: int) -> NeighborList:
    return index.knn(queries, k)
