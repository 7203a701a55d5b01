"""Projection of raw geometry into per-kernel rotation/sign-robust features.

For every kernel point the k nearest cloud points are Gaussian-averaged
into a virtual neighbor, and four scalars describe its relative location:

  f1  signed cosine between the normal and the direction to the virtual
      neighbor (the sign tag of the kernel's ring compensates a normal
      flip; the in-plane ring stores the magnitude),
  f2  distance from the point to the virtual neighbor, in units of sigma,
  f3  distance from the kernel to the virtual neighbor, in units of sigma,
  f4  distance ratio to the two ring-adjacent kernels, walked in the
      kernel's own group traversal order.

Because the in-plane ring belongs to both sign groups, its f4 is stored
once in the above-group orientation and the below-group copy is the
complementary ratio, computed directly from the same distances so the
group exchange under a normal flip is bit-exact.

The whole extraction is vectorized and optionally carries forward-mode
derivatives with respect to a per-point kernel scale, which is what the
scale-adaptation module differentiates through (neighbor membership is
treated as locally constant).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import CylkernError, ParameterError
from .kernels import (FrameSet, KernelLayout, adjacent_orders, build_frames,
                      build_layout, order_above, order_below)
from .pointcloud import PointCloud
from .spatial import NeighborIndex, build_index


class EmptyKernelError(CylkernError):
    """A kernel point has no neighbors to average."""


def weighted_average(kernel_point, neighbors, bandwidth: float):
    """Gaussian-weighted mean of neighbors: w = exp(-|x - k|^2 / d^2)."""
    neighbors = np.asarray(neighbors, dtype=np.float64).reshape(-1, 3)
    if neighbors.shape[0] == 0:
        raise EmptyKernelError("kernel point has no neighbors")
    if not bandwidth > 0.0:
        raise ParameterError("bandwidth must be positive")
    kernel_point = np.asarray(kernel_point, dtype=np.float64)
    d = neighbors - kernel_point
    d2 = d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2
    w = np.exp(-d2 / bandwidth ** 2)
    s = w.sum()
    if s == 0.0:  # all weights underflowed; renormalize in shifted form
        w = np.exp(-(d2 - d2.min()) / bandwidth ** 2)
        s = w.sum()
    return (w[:, None] * neighbors).sum(axis=0) / s


@dataclass(frozen=True)
class ScaleSet:
    """Ordered candidate kernel scales, plus per-point adapted scales."""

    sigmas: np.ndarray                    # (S,) strictly increasing
    adapted: np.ndarray | None = None     # (N,) sigma* after adaptation

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if s.ndim != 1 or s.size < 1:
            raise ParameterError("sigmas must be a 1-D list")
        if np.any(s <= 0.0):
            raise ParameterError("sigmas must be positive")
        if np.any(np.diff(s) <= 0.0):
            raise ParameterError("sigmas must be strictly increasing")
        object.__setattr__(self, "sigmas", s)
        if self.adapted is not None:
            a = np.asarray(self.adapted, dtype=np.float64)
            if a.min() < s[0] - 1e-12 or a.max() > s[-1] + 1e-12:
                raise ParameterError("adapted sigma outside the scale range")
            object.__setattr__(self, "adapted", a)

    def __len__(self) -> int:
        return int(self.sigmas.size)


@dataclass(frozen=True)
class KernelFeatureGrid:
    """Per-point (ring x position x channel) features plus virtual neighbors."""

    grid: np.ndarray            # (N, 3, K, C), channels 0..3 = f1..f4
    xhat: np.ndarray            # (N, 3, K, 3) weighted-average neighbor points
    below_mid_f4: np.ndarray    # (N, K) middle-ring f4 in below-group orientation
    neighbor_ids: np.ndarray    # (N, 3, K, k)
    neighbor_weights: np.ndarray  # (N, 3, K, k) normalized Eq-style weights

    @property
    def K(self) -> int:
        return self.grid.shape[2]

    def group_tensors(self):
        """(above, below) tensors of shape (N, 2, K, C) in traversal order.

        Row 0 is the outer ring of the group, row 1 the shared in-plane
        ring. The below copy of the in-plane ring carries the
        complementary f4 so that flipping every normal exchanges the two
        tensors exactly.
        """
        return group_tensors_from(self.grid, self.below_mid_f4)


def group_tensors_from(grid: np.ndarray, below_mid_f4: np.ndarray):
    K = grid.shape[2]
    oa = order_above(K)
    ob = order_below(K)
    above = np.stack([grid[:, 0][:, oa], grid[:, 1][:, oa]], axis=1)
    mid_below = grid[:, 1].copy()
    mid_below[:, :, 3] = below_mid_f4
    below = np.stack([grid[:, 2][:, ob], mid_below[:, ob]], axis=1)
    return above, below


def _safe_div(num, den):
    return num / np.where(den == 0.0, 1.0, den)


def _norm3(v):
    return np.sqrt(v[..., 0] ** 2 + v[..., 1] ** 2 + v[..., 2] ** 2)


def _extract_arrays(points, normals, positions, unit_offsets, sigma,
                    dring_unit, ids, bandwidth_mode, want_grad):
    """Core f1..f4 computation, optionally with d/d(sigma) forward-mode duals.

    points (N,3), normals (N,3), positions (N,3,K,3) kernel worlds,
    unit_offsets (N,3,K,3) = (positions - x)/sigma, sigma (N,),
    dring_unit (3,) per-ring center distance in units of sigma,
    ids (N,3,K,k) neighbor ids into points.
    """
    N, _, K, k = ids.shape
    X = points[ids]                                   # (N,3,K,k,3)
    diff = X - positions[:, :, :, None, :]
    d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
    if bandwidth_mode == "per_kernel":
        dk2 = (sigma[:, None] * dring_unit[None, :]) ** 2     # (N,3)
    elif bandwidth_mode == "global":
        dk2 = np.repeat((sigma ** 2)[:, None], 3, axis=1)
    else:
        raise ParameterError(f"unknown bandwidth_mode {bandwidth_mode!r}")
    a = d2 / dk2[:, :, None, None]
    a_min = a.min(axis=-1, keepdims=True)
    w = np.exp(-(a - a_min))
    s = w.sum(axis=-1, keepdims=True)
    wn = w / s                                         # (N,3,K,k)
    xhat = np.einsum("nmkj,nmkjc->nmkc", wn, X)

    u = xhat - points[:, None, None, :]
    nu = _norm3(u)
    vdotu = (u * normals[:, None, None, :]).sum(axis=-1)
    c1 = _safe_div(vdotu, nu)
    c1 = np.where(nu == 0.0, 0.0, c1)
    sgn = np.array([1.0, 0.0, -1.0])
    f1 = np.where(np.arange(3)[None, :, None] == 1, np.abs(c1),
                  sgn[None, :, None] * c1)
    f2 = nu / sigma[:, None, None]
    w3 = xhat - positions
    n3 = _norm3(w3)
    f3 = n3 / sigma[:, None, None]

    nxt, prv = adjacent_orders(K)
    ringix = np.arange(3)[:, None]
    Pn = positions[:, ringix, nxt]                     # (N,3,K,3)
    Pp = positions[:, ringix, prv]
    dn = _norm3(xhat - Pn)
    dp = _norm3(xhat - Pp)
    den = dn + dp
    f4 = np.where(den == 0.0, 0.5, _safe_div(dn, den))
    f4c_mid = np.where(den[:, 1] == 0.0, 0.5, _safe_div(dp[:, 1], den[:, 1]))

    grid = np.stack([f1, f2, f3, f4], axis=-1)
    if not want_grad:
        return grid, xhat, f4c_mid, wn, None, None

    # forward-mode duals w.r.t. each point's own sigma (dot(sigma) = 1)
    Pdot = unit_offsets
    d2dot = -2.0 * (diff * Pdot[:, :, :, None, :]).sum(axis=-1)
    if bandwidth_mode == "per_kernel":
        dk2dot = 2.0 * sigma[:, None] * dring_unit[None, :] ** 2
    else:
        dk2dot = np.repeat(2.0 * sigma[:, None], 3, axis=1)
    adot = (d2dot - a * dk2dot[:, :, None, None]) / dk2[:, :, None, None]
    wndot = wn * (-(adot) + (wn * adot).sum(axis=-1, keepdims=True))
    xhatdot = np.einsum("nmkj,nmkjc->nmkc", wndot, X)

    udot = xhatdot
    nudot = np.where(nu == 0.0, 0.0,
                     _safe_div((u * udot).sum(axis=-1), nu))
    vdotudot = (udot * normals[:, None, None, :]).sum(axis=-1)
    c1dot = np.where(nu == 0.0, 0.0,
                     _safe_div(vdotudot - c1 * nudot, nu))
    f1dot = np.where(np.arange(3)[None, :, None] == 1,
                     np.where(c1 == 0.0, 0.0, np.sign(c1) * c1dot),
                     sgn[None, :, None] * c1dot)
    f2dot = (nudot - f2) / sigma[:, None, None]
    w3dot = xhatdot - Pdot
    n3dot = np.where(n3 == 0.0, 0.0,
                     _safe_div((w3 * w3dot).sum(axis=-1), n3))
    f3dot = (n3dot - f3) / sigma[:, None, None]

    Pndot = Pdot[:, ringix, nxt]
    Ppdot = Pdot[:, ringix, prv]
    dndot = np.where(dn == 0.0, 0.0,
                     _safe_div(((xhat - Pn) * (xhatdot - Pndot)).sum(-1), dn))
    dpdot = np.where(dp == 0.0, 0.0,
                     _safe_div(((xhat - Pp) * (xhatdot - Ppdot)).sum(-1), dp))
    dendot = dndot + dpdot
    f4dot = np.where(den == 0.0, 0.0,
                     _safe_div(dndot - f4 * dendot, den))
    f4cdot_mid = np.where(den[:, 1] == 0.0, 0.0,
                          _safe_div(dpdot[:, 1] - f4c_mid * dendot[:, 1], den[:, 1]))

    griddot = np.stack([f1dot, f2dot, f3dot, f4dot], axis=-1)
    return grid, xhat, f4c_mid, wn, (griddot, f4cdot_mid, wndot), xhatdot


def project_features(cloud: PointCloud, frames: FrameSet,
                     index: NeighborIndex, k: int, sigma=None,
                     bandwidth_mode: str = "per_kernel") -> KernelFeatureGrid:
    """Extract the (N, 3, K, 4) feature grid at the frames' kernel scale."""
    if k < 1:
        raise ParameterError("k must be >= 1")
    if sigma is not None and not np.allclose(frames.sigma, sigma):
        raise ParameterError("sigma disagrees with the frames' kernel scale")
    N = len(cloud)
    K = frames.K
    queries = frames.positions.reshape(N * 3 * K, 3)
    ids, _ = index.knn_batch(queries, k)
    ids = ids.reshape(N, 3, K, -1)
    unit = (frames.positions - cloud.points[:, None, None, :]) \
        / frames.sigma[:, None, None, None]
    grid, xhat, f4c, wn, _, _ = _extract_arrays(
        cloud.points, cloud.normals, frames.positions, unit, frames.sigma,
        frames.layout.center_distances / frames.layout.sigma, ids,
        bandwidth_mode, want_grad=False)
    return KernelFeatureGrid(grid, xhat, f4c, ids, wn)


def multiscale_extract(cloud: PointCloud, index: NeighborIndex, k: int,
                       scales: ScaleSet, K: int = 6, azimuth: float = 0.0,
                       bandwidth_mode: str = "per_kernel"):
    """Independent extraction per sigma, stacked in scale order.

    Returns (stack, grids): stack is (N, S, 3, K, 4); grids the per-scale
    KernelFeatureGrid objects.
    """
    grids = []
    for s in scales.sigmas:
        layout = build_layout(float(s), K)
        frames = build_frames(cloud, index, layout, azimuth=azimuth)
        grids.append(project_features(cloud, frames, index, k,
                                      bandwidth_mode=bandwidth_mode))
    stack = np.stack([g.grid for g in grids], axis=1)
    return stack, grids


def softmax_logits(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigma_from_logits(logits: np.ndarray, scales: ScaleSet) -> np.ndarray:
    """sigma* = softmax(logits) . sigmas, per point."""
    return softmax_logits(logits) @ scales.sigmas


def adapt_scale(stack: np.ndarray, weight_net, scales: ScaleSet,
                cloud: PointCloud, index: NeighborIndex, k: int,
                K: int = 6, azimuth: float = 0.0,
                bandwidth_mode: str = "per_kernel"):
    """Interpolate a per-point kernel scale and re-extract the grid there.

    weight_net maps the flattened multiscale stack (N, S*3*K*4) to S
    logits per point. Returns (ScaleSet with adapted sigmas, grid).
    """
    if len(scales) < 2:
        raise ParameterError("scale adaptation needs at least 2 scales")
    N = stack.shape[0]
    logits = np.asarray(weight_net(stack.reshape(N, -1)), dtype=np.float64)
    if logits.shape != (N, len(scales)):
        raise ParameterError("weight_net must produce (N, S) logits")
    sigma_star = sigma_from_logits(logits, scales)
    layout = build_layout(float(scales.sigmas[0]), K)
    frames = build_frames(cloud, index, layout, sigma=sigma_star, azimuth=azimuth)
    ids, _ = index.knn_batch(frames.positions.reshape(-1, 3), k)
    ids = ids.reshape(N, 3, K, -1)
    unit = (frames.positions - cloud.points[:, None, None, :]) \
        / sigma_star[:, None, None, None]
    grid, xhat, f4c, wn, _, _ = _extract_arrays(
        cloud.points, cloud.normals, frames.positions, unit, sigma_star,
        layout.center_distances / layout.sigma, ids, bandwidth_mode,
        want_grad=False)
    return (ScaleSet(scales.sigmas, sigma_star),
            KernelFeatureGrid(grid, xhat, f4c, ids, wn))


@dataclass
class AdaptedExtraction:
    """Values and sigma-derivatives of one adapted extraction pass."""

    above: np.ndarray      # (N, 2, K, 4)
    below: np.ndarray      # (N, 2, K, 4)
    weights: np.ndarray    # (N, 3K, k) normalized neighbor weights
    ids: np.ndarray        # (N, 3K, k)
    above_dot: np.ndarray
    below_dot: np.ndarray
    weights_dot: np.ndarray

    def packed(self) -> np.ndarray:
        n = self.above.shape[0]
        return np.concatenate([self.above.reshape(n, -1),
                               self.below.reshape(n, -1),
                               self.weights.reshape(n, -1)], axis=1)

    def packed_dot(self) -> np.ndarray:
        n = self.above.shape[0]
        return np.concatenate([self.above_dot.reshape(n, -1),
                               self.below_dot.reshape(n, -1),
                               self.weights_dot.reshape(n, -1)], axis=1)


def extract_adapted(cloud: PointCloud, index: NeighborIndex, sigma: np.ndarray,
                    bases, K: int, k: int,
                    bandwidth_mode: str = "per_kernel") -> AdaptedExtraction:
    """Extraction at per-point sigma with d/d(sigma) duals, group-packed.

    bases is the fixed (t1, t2) pair from the cloud's geometry; the
    tangent frame does not depend on sigma, so it is shared across scales.
    """
    t1, t2 = bases
    layout = build_layout(1.0, K)  # unit layout; sigma scales per point
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    N = len(cloud)
    x = cloud.points
    v = cloud.normals
    lc = layout.local_coords  # (3,K,3) at sigma=1
    unit = (lc[None, :, :, 0, None] * t1[:, None, None, :]
            + lc[None, :, :, 1, None] * t2[:, None, None, :]
            + lc[None, :, :, 2, None] * v[:, None, None, :])
    positions = x[:, None, None, :] + sigma[:, None, None, None] * unit
    ids, _ = index.knn_batch(positions.reshape(-1, 3), k)
    ids = ids.reshape(N, 3, K, -1)
    grid, xhat, f4c, wn, dots, _ = _extract_arrays(
        x, v, positions, unit, sigma, layout.center_distances, ids,
        bandwidth_mode, want_grad=True)
    griddot, f4cdot, wndot = dots
    above, below = group_tensors_from(grid, f4c)
    above_dot, below_dot = group_tensors_from(griddot, f4cdot)
    kk = ids.shape[-1]
    return AdaptedExtraction(above, below, wn.reshape(N, 3 * K, kk),
                             ids.reshape(N, 3 * K, kk),
                             above_dot, below_dot,
                             wndot.reshape(N, 3 * K, kk))


# ---------------------------------------------------------------------------
# per-cloud geometry cache consumed by the encoder


@dataclass
class CloudGeometry:
    """Everything about a cloud the encoder needs that has no parameters."""

    cloud: PointCloud
    index: NeighborIndex
    layout: KernelLayout
    frames: FrameSet
    grid: KernelFeatureGrid
    above_geo: np.ndarray       # (N, 2, K, 4)
    below_geo: np.ndarray       # (N, 2, K, 4)
    above_slots: np.ndarray     # (2K,) flat slot ids in above traversal order
    below_slots: np.ndarray     # (2K,)
    neighbor_ids: np.ndarray    # (N, 3K, k)
    neighbor_weights: np.ndarray  # (N, 3K, k)
    canon_order: np.ndarray     # lexicographic point order (rank -> id)
    nbr_matrix: sp.csr_matrix   # (N*3K, N) averaging operator, canonical columns
    global_W: np.ndarray | None  # (N, N) row-normalized Gaussian weights
    scale_stack: np.ndarray | None    # (N, S, 3, K, 4) multiscale stack
    scales: ScaleSet | None
    bases: tuple[np.ndarray, np.ndarray]
    knn_k: int
    bandwidth_mode: str

    @property
    def n_points(self) -> int:
        return len(self.cloud)

    @property
    def K(self) -> int:
        return self.layout.K


def group_slot_tables(K: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat (ring*K + j) slot ids of the two groups, rows [outer, middle]."""
    oa = order_above(K)
    ob = order_below(K)
    above = np.concatenate([0 * K + oa, 1 * K + oa])
    below = np.concatenate([2 * K + ob, 1 * K + ob])
    return above, below


def neighbor_matrix(ids: np.ndarray, weights: np.ndarray, n_points: int) -> sp.csr_matrix:
    """Sparse operator mapping point features to per-slot weighted averages."""
    n, slots, k = ids.shape
    rows = np.repeat(np.arange(n * slots), k)
    cols = ids.reshape(-1)
    return sp.csr_matrix((weights.reshape(-1), (rows, cols)),
                         shape=(n * slots, n_points))


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Lexicographic point order (rank -> point id), permutation-invariant."""
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


def global_context_weights(points: np.ndarray, bandwidth: float):
    """Canonically ordered, row-normalized Gaussian affinity matrix.

    Rows/columns follow the lexicographic point order so that the matrix
    (and therefore global aggregation) is exactly permutation-invariant.
    """
    if not bandwidth > 0.0:
        raise ParameterError("global bandwidth must be positive")
    order = canonical_order(points)
    P = points[order]
    diff = P[:, None, :] - P[None, :, :]
    d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
    W = np.exp(-d2 / bandwidth ** 2)
    W = W / W.sum(axis=1, keepdims=True)
    return order, W


def build_geometry(cloud: PointCloud, *, K: int = 6, knn_k: int = 10,
                   sigma: float = 0.15, bandwidth_mode: str = "per_kernel",
                   azimuth: float = 0.0, k_azimuth: int = 16,
                   global_bandwidth: float | None = 0.5,
                   scales: ScaleSet | None = None) -> CloudGeometry:
    """Precompute all parameter-free geometry of one cloud."""
    if cloud.normals is None:
        raise ParameterError("cloud needs normals (estimate or analytic)")
    index = build_index(cloud.points)
    layout = build_layout(sigma, K)
    frames = build_frames(cloud, index, layout, azimuth=azimuth,
                          k_azimuth=k_azimuth)
    grid = project_features(cloud, frames, index, knn_k,
                            bandwidth_mode=bandwidth_mode)
    above_geo, below_geo = grid.group_tensors()
    above_slots, below_slots = group_slot_tables(K)
    n = len(cloud)
    kk = grid.neighbor_ids.shape[-1]
    ids_flat = grid.neighbor_ids.reshape(n, 3 * K, kk)
    wn_flat = grid.neighbor_weights.reshape(n, 3 * K, kk)
    canon = canonical_order(cloud.points)
    rank = np.empty(n, dtype=np.int64)
    rank[canon] = np.arange(n)
    nbr = neighbor_matrix(rank[ids_flat], wn_flat, n)
    g_W = None
    if global_bandwidth is not None:
        _, g_W = global_context_weights(cloud.points, global_bandwidth)
    stack = None
    if scales is not None and len(scales) > 1:
        stack, _ = multiscale_extract(cloud, index, knn_k, scales, K=K,
                                      azimuth=azimuth,
                                      bandwidth_mode=bandwidth_mode)
    return CloudGeometry(cloud, index, layout, frames, grid, above_geo,
                         below_geo, above_slots, below_slots, ids_flat,
                         wn_flat, canon, nbr, g_W, stack, scales,
                         (frames.t1, frames.t2), knn_k, bandwidth_mode)


# ---------------------------------------------------------------------------
# flat binary grid records (header: N, rings, K, C as uint32 LE; payload f8 LE)

_GRID_HEADER = struct.Struct("<4I")


def write_grid_record(fileobj, grid: np.ndarray) -> None:
    if grid.ndim != 4:
        raise ParameterError("grid record expects an (N, rings, K, C) array")
    n, rings, K, C = grid.shape
    fileobj.write(_GRID_HEADER.pack(n, rings, K, C))
    fileobj.write(np.ascontiguousarray(grid, dtype="<f8").tobytes())


def read_grid_record(fileobj) -> np.ndarray:
    head = fileobj.read(_GRID_HEADER.size)
    if len(head) != _GRID_HEADER.size:
        raise ParameterError("grid record truncated header")
    n, rings, K, C = _GRID_HEADER.unpack(head)
    payload = fileobj.read(8 * n * rings * K * C)
    if len(payload) != 8 * n * rings * K * C:
        raise ParameterError("grid record truncated payload")
    return np.frombuffer(payload, dtype="<f8").reshape(n, rings, K, C).copy()
