"""Cylindrical kernel layout, normal-aligned frames, sign groups.

The layout is three rings of K kernel points: one ring in the tangent
plane and one each above and below it along the normal. Ring tables are
built so that the map (z -> -z, j -> -j mod K) is *bit-exact*: flipping
the normal therefore exchanges the above/below groups as an index
permutation with no floating-point tolerance at all.

Traversal orders: the above group walks its ring clockwise when viewed
down the +v axis (increasing j here — the convention is arbitrary, only
the mutual reversal matters); the below group walks counterclockwise
(decreasing j). Flipping v swaps the two sequences exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .pointcloud import PointCloud
from .spatial import NeighborIndex

_RING_SIGNS = np.array([1, 0, -1], dtype=np.int64)   # upper, middle, lower
_RING_HEIGHTS = np.array([1.0, 0.0, -1.0])           # in units of sigma
# center distance of each ring's kernels, in units of sigma (r = h = sigma)
_RING_CENTER_DIST = np.array([math.sqrt(2.0), 1.0, math.sqrt(2.0)])


def _ring_tables(K: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin at angles 2*pi*j/K with exact mirror symmetry j <-> K-j."""
    cos_t = np.empty(K)
    sin_t = np.empty(K)
    for j in range(K // 2 + 1):
        theta = 2.0 * math.pi * j / K
        cos_t[j] = math.cos(theta)
        sin_t[j] = math.sin(theta)
    sin_t[0] = 0.0
    if K % 2 == 0:
        sin_t[K // 2] = 0.0
    for j in range(K // 2 + 1, K):
        cos_t[j] = cos_t[K - j]
        sin_t[j] = -sin_t[K - j]
    return cos_t, sin_t


@dataclass(frozen=True)
class KernelLayout:
    """Canonical kernel coordinates in the frame whose normal is +z."""

    K: int
    sigma: float
    cos_table: np.ndarray  # (K,)
    sin_table: np.ndarray  # (K,)

    @property
    def rings(self) -> int:
        return 3

    @property
    def heights(self) -> np.ndarray:
        return _RING_HEIGHTS * self.sigma

    @property
    def radius(self) -> float:
        return self.sigma

    @property
    def center_distances(self) -> np.ndarray:
        """Per-ring distance from the center point to its kernels (d_k)."""
        return _RING_CENTER_DIST * self.sigma

    @property
    def local_coords(self) -> np.ndarray:
        """(3, K, 3) kernel coordinates with normal = +z."""
        lc = np.empty((3, self.K, 3))
        lc[:, :, 0] = self.sigma * self.cos_table[None, :]
        lc[:, :, 1] = self.sigma * self.sin_table[None, :]
        lc[:, :, 2] = (_RING_HEIGHTS * self.sigma)[:, None]
        return lc

    @property
    def ring_signs(self) -> np.ndarray:
        return _RING_SIGNS


def build_layout(sigma: float, K: int) -> KernelLayout:
    """Three rings of K kernels with radius = height spacing = sigma."""
    if not 4 <= K <= 8:
        raise ParameterError(f"K must be in [4, 8], got {K}")
    if not sigma > 0.0:
        raise ParameterError("sigma must be positive")
    cos_t, sin_t = _ring_tables(K)
    cos_t.flags.writeable = False
    sin_t.flags.writeable = False
    return KernelLayout(K, float(sigma), cos_t, sin_t)


def order_above(K: int) -> np.ndarray:
    """Ring traversal of the above group: increasing j viewed down +v."""
    return np.arange(K, dtype=np.int64)


def order_below(K: int) -> np.ndarray:
    """Ring traversal of the below group: decreasing j, starting at 0."""
    return np.concatenate([[0], np.arange(K - 1, 0, -1)]).astype(np.int64)


def exchange_permutation(K: int) -> tuple[np.ndarray, np.ndarray]:
    """Slot map (ring, j) -> (ring', j') induced by flipping the normal."""
    m = np.arange(3)[:, None].repeat(K, axis=1)
    j = np.arange(K)[None, :].repeat(3, axis=0)
    return (2 - m), (K - j) % K


def adjacent_orders(K: int) -> tuple[np.ndarray, np.ndarray]:
    """(next, prev) ring positions (3, K) along each ring's traversal.

    Rings 0 (upper) and 1 (middle) follow the above-group order, ring 2
    (lower) follows the below-group order, so next/prev swap exactly when
    the normal flips.
    """
    j = np.arange(K)
    nxt = np.empty((3, K), dtype=np.int64)
    prv = np.empty((3, K), dtype=np.int64)
    nxt[0] = (j + 1) % K
    prv[0] = (j - 1) % K
    nxt[1] = (j + 1) % K
    prv[1] = (j - 1) % K
    nxt[2] = (j - 1) % K
    prv[2] = (j + 1) % K
    return nxt, prv


def tangent_basis(v: np.ndarray, azimuth: float = 0.0):
    """Deterministic orthonormal completion of a unit normal.

    t1 projects the world axis least aligned with v onto v's orthogonal
    plane; t2 = v x t1. The optional azimuth rotates (t1, t2) in-plane
    (a test hook for the ring-reindexing invariance).
    """
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ParameterError("normal must be nonzero")
    if abs(n - 1.0) > 1e-9:
        raise ParameterError("normal must be unit length within 1e-9")
    t1, t2 = _tangent_bases(v.reshape(1, 3))
    t1, t2 = t1[0], t2[0]
    if azimuth != 0.0:
        c, s = math.cos(azimuth), math.sin(azimuth)
        t1, t2 = c * t1 + s * t2, -s * t1 + c * t2
    return t1, t2


def _tangent_bases(v: np.ndarray):
    """Vectorized world-axis tangent bases for unit normals (N, 3)."""
    n = v.shape[0]
    a = np.argmin(np.abs(v), axis=1)
    e = np.zeros((n, 3))
    e[np.arange(n), a] = 1.0
    t1 = e - (np.sum(v * e, axis=1, keepdims=True)) * v
    t1 = t1 / np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(v, t1)
    return t1, t2


def _data_driven_bases(cloud: PointCloud, index: NeighborIndex,
                       k_azimuth: int, azimuth: float):
    """Tangent bases whose azimuth follows the local point distribution.

    t1 is the tangent-plane projection of the offset from each point to
    the centroid of its k nearest neighbors. The construction is exactly
    equivariant under rigid motion and bit-exactly invariant under a
    normal sign flip (v enters quadratically). Points whose projection is
    negligible fall back to the world-axis completion.
    """
    pts = cloud.points
    v = cloud.normals
    kk = min(k_azimuth, len(cloud))
    ids, _ = index.knn_batch(pts, kk)
    centroid = pts[ids].mean(axis=1)
    d = centroid - pts
    proj = d - np.sum(v * d, axis=1, keepdims=True) * v
    plen = np.linalg.norm(proj, axis=1)
    dlen = np.linalg.norm(d, axis=1)
    degenerate = plen <= 1e-6 * np.maximum(dlen, 1e-300)
    t1 = np.empty_like(pts)
    ok = ~degenerate
    t1[ok] = proj[ok] / plen[ok, None]
    if degenerate.any():
        fb1, _ = _tangent_bases(v[degenerate])
        t1[degenerate] = fb1
    t2 = np.cross(v, t1)
    if azimuth != 0.0:
        c, s = math.cos(azimuth), math.sin(azimuth)
        t1, t2 = c * t1 + s * t2, -s * t1 + c * t2
    return t1, t2


def _world_positions(x: np.ndarray, t1: np.ndarray, t2: np.ndarray,
                     v: np.ndarray, layout: KernelLayout, sigma=None):
    """(N, 3, K, 3) world kernel positions; sigma may be scalar or (N,)."""
    if sigma is None:
        sigma = layout.sigma
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim == 0:
        sigma = np.full(x.shape[0], float(sigma))
    lx = sigma[:, None] * layout.cos_table[None, :]   # (N, K)
    ly = sigma[:, None] * layout.sin_table[None, :]
    lz = sigma[:, None] * _RING_HEIGHTS[None, :]      # (N, 3)
    return (x[:, None, None, :]
            + lx[:, None, :, None] * t1[:, None, None, :]
            + ly[:, None, :, None] * t2[:, None, None, :]
            + lz[:, :, None, None] * v[:, None, None, :])


@dataclass(frozen=True)
class KernelFrame:
    """World kernels of one point: positions, sign tags, traversal orders."""

    point: np.ndarray          # (3,)
    normal: np.ndarray         # (3,)
    t1: np.ndarray             # (3,)
    t2: np.ndarray             # (3,)
    positions: np.ndarray      # (3, K, 3)
    sign: np.ndarray           # (3,) per-ring sign tag {+1, 0, -1}
    order_above: np.ndarray    # (K,)
    order_below: np.ndarray    # (K,)
    center_distances: np.ndarray  # (3,) d_k per ring

    @property
    def K(self) -> int:
        return self.positions.shape[1]


def place_kernels(point, normal, layout: KernelLayout,
                  basis=None) -> KernelFrame:
    """Align the layout to one point's unsigned normal.

    basis, when given, is a (t1, t2) pair (e.g. the cloud-driven bases of
    FrameSet); otherwise the deterministic world-axis completion is used.
    """
    point = np.asarray(point, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    if basis is None:
        t1, t2 = tangent_basis(normal)
    else:
        t1, t2 = (np.asarray(b, dtype=np.float64) for b in basis)
    pos = _world_positions(point.reshape(1, 3), t1.reshape(1, 3),
                           t2.reshape(1, 3), normal.reshape(1, 3), layout)[0]
    return KernelFrame(point, normal, t1, t2, pos, _RING_SIGNS.copy(),
                       order_above(layout.K), order_below(layout.K),
                       layout.center_distances)


@dataclass(frozen=True)
class FrameSet:
    """Vectorized kernel frames for every point of a cloud."""

    layout: KernelLayout
    points: np.ndarray      # (N, 3)
    normals: np.ndarray     # (N, 3)
    t1: np.ndarray          # (N, 3)
    t2: np.ndarray          # (N, 3)
    positions: np.ndarray   # (N, 3, K, 3)
    sigma: np.ndarray       # (N,) per-point kernel scale
    center_distances: np.ndarray  # (N, 3) per-ring d_k

    @property
    def K(self) -> int:
        return self.layout.K

    def frame(self, i: int) -> KernelFrame:
        return KernelFrame(self.points[i], self.normals[i], self.t1[i],
                           self.t2[i], self.positions[i], _RING_SIGNS.copy(),
                           order_above(self.K), order_below(self.K),
                           self.center_distances[i])


def build_frames(cloud: PointCloud, index: NeighborIndex,
                 layout: KernelLayout, sigma=None, azimuth: float = 0.0,
                 k_azimuth: int = 16) -> FrameSet:
    """Frames for a whole cloud using the data-driven tangent azimuth.

    sigma may be None (layout's sigma), a scalar, or per-point (N,).
    """
    if cloud.normals is None:
        raise ParameterError("cloud needs normals to build kernel frames")
    t1, t2 = _data_driven_bases(cloud, index, k_azimuth, azimuth)
    sig = layout.sigma if sigma is None else sigma
    sig = np.asarray(sig, dtype=np.float64)
    if sig.ndim == 0:
        sig = np.full(len(cloud), float(sig))
    pos = _world_positions(cloud.points, t1, t2, cloud.normals, layout, sig)
    dists = sig[:, None] * _RING_CENTER_DIST[None, :]
    return FrameSet(layout, cloud.points, cloud.normals, t1, t2, pos, sig, dists)
