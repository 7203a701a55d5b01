"""Exact k-nearest-neighbor queries with deterministic tie-breaking.

The index is a balanced kd-tree (median split over the widest axis,
bucketed leaves). Results are sorted by (distance, then lexicographic
point coordinates), which makes query output independent of the order in
which points were inserted — the property that keeps every downstream
descriptor permutation-invariant.

The traversal kernel is written once and JIT-compiled with numba when
available; without numba the same function runs as plain Python with
identical arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


_LEAF_SIZE = 16


@njit(cache=True)
def _key_less(d2a, xa, ya, za, d2b, xb, yb, zb):
    if d2a != d2b:
        return d2a < d2b
    if xa != xb:
        return xa < xb
    if ya != yb:
        return ya < yb
    return za < zb


@njit(cache=True)
def _query_into(pts, axis, split, left, right, start, count, perm,
                qx, qy, qz, kk, cand_id, cand_d2):
    """Fill cand_id/cand_d2 (length kk) for one query point; returns kk."""
    stack_node = np.empty(256, dtype=np.int32)
    stack_d2 = np.empty(256, dtype=np.float64)
    top = 0
    stack_node[top] = 0
    stack_d2[top] = 0.0
    top += 1
    ncand = 0
    while top > 0:
        top -= 1
        node = stack_node[top]
        pd2 = stack_d2[top]
        if ncand == kk and pd2 > cand_d2[kk - 1]:
            continue
        ax = axis[node]
        if ax < 0:  # leaf
            s = start[node]
            for i in range(s, s + count[node]):
                p = perm[i]
                dx = pts[p, 0] - qx
                dy = pts[p, 1] - qy
                dz = pts[p, 2] - qz
                d2 = dx * dx + dy * dy + dz * dz
                if ncand < kk:
                    pos = ncand
                    while pos > 0 and _key_less(
                            d2, pts[p, 0], pts[p, 1], pts[p, 2],
                            cand_d2[pos - 1], pts[cand_id[pos - 1], 0],
                            pts[cand_id[pos - 1], 1], pts[cand_id[pos - 1], 2]):
                        cand_d2[pos] = cand_d2[pos - 1]
                        cand_id[pos] = cand_id[pos - 1]
                        pos -= 1
                    cand_d2[pos] = d2
                    cand_id[pos] = p
                    ncand += 1
                else:
                    w = kk - 1
                    if _key_less(d2, pts[p, 0], pts[p, 1], pts[p, 2],
                                 cand_d2[w], pts[cand_id[w], 0],
                                 pts[cand_id[w], 1], pts[cand_id[w], 2]):
                        pos = w
                        while pos > 0 and _key_less(
                                d2, pts[p, 0], pts[p, 1], pts[p, 2],
                                cand_d2[pos - 1], pts[cand_id[pos - 1], 0],
                                pts[cand_id[pos - 1], 1], pts[cand_id[pos - 1], 2]):
                            cand_d2[pos] = cand_d2[pos - 1]
                            cand_id[pos] = cand_id[pos - 1]
                            pos -= 1
                        cand_d2[pos] = d2
                        cand_id[pos] = p
        else:
            if ax == 0:
                dxa = qx - split[node]
            elif ax == 1:
                dxa = qy - split[node]
            else:
                dxa = qz - split[node]
            if dxa < 0.0:
                near = left[node]
                far = right[node]
            else:
                near = right[node]
                far = left[node]
            stack_node[top] = far
            stack_d2[top] = dxa * dxa
            top += 1
            stack_node[top] = near
            stack_d2[top] = pd2
            top += 1
    return ncand


@njit(cache=True)
def _query_batch(pts, axis, split, left, right, start, count, perm,
                 queries, kk, out_id, out_d2):
    for q in range(queries.shape[0]):
        _query_into(pts, axis, split, left, right, start, count, perm,
                    queries[q, 0], queries[q, 1], queries[q, 2],
                    kk, out_id[q], out_d2[q])


@dataclass(frozen=True)
class NeighborIndex:
    """Immutable kd-tree over a fixed point array; safe for concurrent queries."""

    points: np.ndarray
    _axis: np.ndarray
    _split: np.ndarray
    _left: np.ndarray
    _right: np.ndarray
    _start: np.ndarray
    _count: np.ndarray
    _perm: np.ndarray

    def __len__(self) -> int:
        return self.points.shape[0]

    def knn(self, query, k: int):
        """The min(k, N) nearest stored points as a list of (id, distance)."""
        ids, dists = self.knn_batch(np.asarray(query, dtype=np.float64).reshape(1, 3), k)
        return [(int(i), float(d)) for i, d in zip(ids[0], dists[0])]

    def knn_batch(self, queries: np.ndarray, k: int, squared: bool = False):
        """Vectorized exact kNN; returns (ids, distances) of shape (Q, min(k, N)).

        With squared=True the second array holds squared distances exactly as
        accumulated by the traversal (dx*dx + dy*dy + dz*dz).
        """
        if k < 1:
            raise ParameterError("k must be >= 1")
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        if queries.ndim != 2 or queries.shape[1] != 3:
            raise ParameterError("queries must be (Q, 3)")
        if not np.isfinite(queries).all():
            raise ParameterError("queries contain NaN/Inf")
        kk = min(k, len(self))
        out_id = np.empty((queries.shape[0], kk), dtype=np.int64)
        out_d2 = np.empty((queries.shape[0], kk), dtype=np.float64)
        _query_batch(self.points, self._axis, self._split, self._left,
                     self._right, self._start, self._count, self._perm,
                     queries, kk, out_id, out_d2)
        return out_id, (out_d2 if squared else np.sqrt(out_d2))


def build_index(points: np.ndarray) -> NeighborIndex:
    """Build the kd-tree. Points are copied; the index never mutates."""
    pts = np.array(points, dtype=np.float64, order="C", copy=True)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ParameterError(f"points must be (N>=1, 3), got {pts.shape}")
    if not np.isfinite(pts).all():
        raise ParameterError("points contain NaN/Inf")
    n = pts.shape[0]
    perm = np.arange(n, dtype=np.int32)
    axis: list[int] = []
    split: list[float] = []
    left: list[int] = []
    right: list[int] = []
    start: list[int] = []
    count: list[int] = []

    def new_node():
        axis.append(-1)
        split.append(0.0)
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(axis) - 1

    def build(lo: int, hi: int) -> int:
        node = new_node()
        sub = perm[lo:hi]
        coords = pts[sub]
        extents = coords.max(axis=0) - coords.min(axis=0)
        if hi - lo <= _LEAF_SIZE or extents.max() == 0.0:
            start[node] = lo
            count[node] = hi - lo
            return node
        ax = int(np.argmax(extents))
        m = (hi - lo) // 2
        order = np.argpartition(coords[:, ax], m)
        perm[lo:hi] = sub[order]
        axis[node] = ax
        split[node] = pts[perm[lo + m], ax]
        left[node] = build(lo, lo + m)
        right[node] = build(lo + m, hi)
        return node

    import sys

    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 10000))
    try:
        build(0, n)
    finally:
        sys.setrecursionlimit(old_limit)

    pts.flags.writeable = False
    return NeighborIndex(
        pts,
        np.array(axis, dtype=np.int32),
        np.array(split, dtype=np.float64),
        np.array(left, dtype=np.int32),
        np.array(right, dtype=np.int32),
        np.array(start, dtype=np.int32),
        np.array(count, dtype=np.int32),
        perm,
    )


def knn(index: NeighborIndex, query, k: int):
    """Module-level alias for NeighborIndex.knn."""
    return index.knn(query, k)
