"""Soft correspondence, closed-form alignment, metrics and the ICP baseline.

The registration head follows the virtual-point recipe: descriptor dot
products become softmax correspondence weights, each source point gets a
weighted "virtual" target, and a weighted Procrustes solve (3x3 SVD with
a determinant fix) produces the rigid transform. The SVD solve carries a
hand-derived backward pass so the whole head trains end to end; gradients
are zeroed (and counted) when the singular spectrum is too degenerate for
the derivative to be trustworthy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateGeometryError, ParameterError
from .pointcloud import PointCloud, RigidTransform
from .spatial import build_index

METRIC_COLUMNS = ("R-MSE", "R-RMSE", "R-MAE", "T-MSE", "T-RMSE", "T-MAE")


@dataclass(frozen=True)
class Correspondence:
    """Soft assignment of every source point over the target cloud."""

    weights: np.ndarray   # (N, M), rows sum to 1
    virtual: np.ndarray   # (N, 3) weighted target points


def soft_correspondence(desc_src: np.ndarray, desc_tgt: np.ndarray,
                        pts_tgt: np.ndarray, temperature: float) -> Correspondence:
    """Softmax over scaled descriptor dot products; rows sum to one."""
    if not temperature > 0.0:
        raise ParameterError("temperature must be positive")
    d = desc_src.shape[1]
    scores = desc_src @ desc_tgt.T / (np.sqrt(d) * temperature)
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    return Correspondence(w, w @ pts_tgt)


def soft_correspondence_op(desc_src: Tensor, desc_tgt: Tensor,
                           pts_tgt: np.ndarray, temperature: float):
    """Graph version; returns (weights, virtual) tensors."""
    if not temperature > 0.0:
        raise ParameterError("temperature must be positive")
    d = desc_src.data.shape[1]
    scale = 1.0 / (np.sqrt(d) * temperature)
    scores = ad.mul(ad.matmul(desc_src, ad.transpose(desc_tgt)), scale)
    weights = ad.softmax(scores, axis=1)
    virtual = ad.matmul(weights, ad.constant(pts_tgt))
    return weights, virtual


class _SafeguardStats:
    """Counts backward passes skipped because of a degenerate spectrum."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


svd_safeguard = _SafeguardStats()

_GAP_TOL = 1e-8


def _procrustes_forward(src, virt, weights=None):
    src = np.asarray(src, dtype=np.float64)
    virt = np.asarray(virt, dtype=np.float64)
    n = src.shape[0]
    if n < 3:
        raise ParameterError("procrustes needs at least 3 points")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0.0):
        raise ParameterError("weights must be nonnegative, one per point")
    W = w.sum()
    if W <= 0.0:
        raise ParameterError("weights sum to zero")
    cs = (w[:, None] * src).sum(axis=0) / W
    cv = (w[:, None] * virt).sum(axis=0) / W
    S = src - cs
    V = virt - cv
    H = (w[:, None] * S).T @ V
    U, sing, Vh = np.linalg.svd(H)
    if sing[1] <= 1e-12 * max(sing[0], 1e-300):
        raise DegenerateGeometryError("cross-covariance has rank < 2")
    Vm = Vh.T
    d = np.sign(np.linalg.det(Vm @ U.T))
    D = np.array([1.0, 1.0, d])
    R = (Vm * D) @ U.T
    t = cv - R @ cs
    cache = (src, virt, w, W, cs, S, V, H, U, sing, Vm, D, R)
    return R, t, cache


def procrustes(src, virtual, weights=None) -> RigidTransform:
    """Weighted least-squares rigid transform mapping src onto virtual."""
    R, t, _ = _procrustes_forward(src, virtual, weights)
    return RigidTransform(R, t)


def procrustes_backward(cache, g_R: np.ndarray, g_t: np.ndarray):
    """Gradients of the full procrustes map w.r.t. src and virtual points.

    Returns (g_src, g_virt). When singular values are pairwise closer
    than 1e-8 (or the small pair sums below it, where the reflection
    branch is unstable) both gradients are zero and the safeguard counter
    increments; the forward value is still perfectly usable.
    """
    src, virt, w, W, cs, S, V, H, U, sing, Vm, D, R = cache
    g_R = np.asarray(g_R, dtype=np.float64)
    g_t = np.asarray(g_t, dtype=np.float64)

    # t = cv - R cs
    g_cv = g_t.copy()
    g_R_total = g_R - np.outer(g_t, cs)
    g_cs_direct = -R.T @ g_t

    gaps = [abs(sing[0] - sing[1]), abs(sing[0] - sing[2]),
            abs(sing[1] - sing[2]), sing[1] + sing[2]]
    if min(gaps) <= _GAP_TOL:
        svd_safeguard.count += 1
        g_src = np.zeros_like(src)
        g_virt = np.zeros_like(virt)
        # the centroid path through t is still well-defined and useful
        g_src += (w / W)[:, None] * g_cs_direct
        g_virt += (w / W)[:, None] * g_cv
        return g_src, g_virt

    # R = Vm diag(D) U^T
    gVm = (g_R_total @ U) * D
    gU = (g_R_total.T @ Vm) * D

    s2 = sing ** 2
    F = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            if i != j:
                F[i, j] = 1.0 / (s2[j] - s2[i])
    Au = U.T @ gU - gU.T @ U
    Av = Vm.T @ gVm - gVm.T @ Vm
    inner = (F * Au) * sing[None, :] + sing[:, None] * (F * Av)
    gH = U @ inner @ Vm.T

    gS_hat = w[:, None] * (V @ gH.T)
    gV_hat = w[:, None] * (S @ gH)
    g_src = gS_hat + (w / W)[:, None] * (g_cs_direct - gS_hat.sum(axis=0))
    g_virt = gV_hat + (w / W)[:, None] * (g_cv - gV_hat.sum(axis=0))
    return g_src, g_virt


def procrustes_op(src, virtual, weights=None) -> Tensor:
    """Graph op: stacked (4, 3) output, rows 0..2 = R, row 3 = t."""
    src_t = ad.as_tensor(src)
    virt_t = ad.as_tensor(virtual)
    R, t, cache = _procrustes_forward(src_t.data, virt_t.data, weights)
    out = np.vstack([R, t])

    def backward(g):
        g_src, g_virt = procrustes_backward(cache, g[:3], g[3])
        if src_t.requires_grad:
            src_t._accumulate(g_src)
        if virt_t.requires_grad:
            virt_t._accumulate(g_virt)

    return ad.make_op(out, (src_t, virt_t), backward)


def loss_rt(R, t, R_gt, t_gt) -> float:
    """|R^T R_gt - I|_F^2 + |t - t_gt|^2."""
    dR = R.T @ R_gt - np.eye(3)
    dt = np.asarray(t) - np.asarray(t_gt)
    return float((dR * dR).sum() + (dt * dt).sum())


def loss_rt_op(rt: Tensor, R_gt: np.ndarray, t_gt: np.ndarray) -> Tensor:
    """Graph loss on a stacked (4, 3) procrustes output."""
    R = ad.narrow(rt, 0, 0, 3)
    t = ad.reshape(ad.narrow(rt, 0, 3, 1), (3,))
    dR = ad.sub(ad.matmul(ad.transpose(R), ad.constant(R_gt)),
                ad.constant(np.eye(3)))
    dt = ad.sub(t, ad.constant(np.asarray(t_gt, dtype=np.float64)))
    return ad.add(ad.reduce_sum(ad.mul(dR, dR)), ad.reduce_sum(ad.mul(dt, dt)))


# ---------------------------------------------------------------------------
# Euler angles and the metric suite


def compose_euler_zyx(alpha_deg: float, beta_deg: float, gamma_deg: float) -> np.ndarray:
    """Intrinsic Z-Y-X rotation: Rz(alpha) @ Ry(beta) @ Rx(gamma)."""
    a, b, g = np.deg2rad([alpha_deg, beta_deg, gamma_deg])
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cg, sg = np.cos(g), np.sin(g)
    Rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    Ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cg, -sg], [0.0, sg, cg]])
    return Rz @ Ry @ Rx


def euler_zyx(R: np.ndarray) -> tuple[float, float, float]:
    """Decompose into intrinsic Z-Y-X angles in degrees.

    Near the beta = +-90 degree singularity the gamma = 0 convention is
    used; re-composition still reproduces R within 1e-9.
    """
    R = np.asarray(R, dtype=np.float64)
    sb = -R[2, 0]
    if abs(sb) < 1.0 - 1e-9:
        beta = np.arcsin(sb)
        alpha = np.arctan2(R[1, 0], R[0, 0])
        gamma = np.arctan2(R[2, 1], R[2, 2])
    else:
        beta = np.pi / 2.0 if sb > 0 else -np.pi / 2.0
        gamma = 0.0
        alpha = np.arctan2(-R[0, 1], R[1, 1])
    return tuple(np.degrees([alpha, beta, gamma]))


@dataclass(frozen=True)
class RegistrationMetrics:
    """Six-number error suite over Euler-angle and translation residuals."""

    r_mse: float
    r_rmse: float
    r_mae: float
    t_mse: float
    t_rmse: float
    t_mae: float

    def as_dict(self) -> dict:
        return dict(zip(METRIC_COLUMNS, self.as_row()))

    def as_row(self) -> tuple[float, ...]:
        return (self.r_mse, self.r_rmse, self.r_mae,
                self.t_mse, self.t_rmse, self.t_mae)


def compute_metrics(predictions, ground_truths) -> RegistrationMetrics:
    """Pool per-pair residuals into MSE / RMSE / MAE for R and t.

    Rotation residuals are differences of intrinsic Z-Y-X Euler angles in
    degrees; all three components of every pair are pooled together.
    """
    preds = list(predictions)
    gts = list(ground_truths)
    if len(preds) != len(gts) or not preds:
        raise ParameterError("need equally many predictions and ground truths")
    r_res = []
    t_res = []
    for p, g in zip(preds, gts):
        r_res.append(np.subtract(euler_zyx(p.R), euler_zyx(g.R)))
        t_res.append(p.t - g.t)
    r = np.concatenate(r_res)
    t = np.concatenate(t_res)
    r_mse = float(np.mean(r ** 2))
    t_mse = float(np.mean(t ** 2))
    return RegistrationMetrics(r_mse, float(np.sqrt(r_mse)), float(np.mean(np.abs(r))),
                               t_mse, float(np.sqrt(t_mse)), float(np.mean(np.abs(t))))


# ---------------------------------------------------------------------------
# point-to-point ICP baseline


def icp_baseline(src, tgt, max_iters: int = 50, tol: float = 1e-8) -> RigidTransform:
    """Classic ICP from identity: NN matching + procrustes until converged.

    Returns the best transform seen (by mean matched distance).
    """
    src = src.points if isinstance(src, PointCloud) else np.asarray(src, dtype=np.float64)
    tgt = tgt.points if isinstance(tgt, PointCloud) else np.asarray(tgt, dtype=np.float64)
    if src.shape[0] == 0 or tgt.shape[0] == 0:
        raise ParameterError("icp needs nonempty clouds")
    index = build_index(tgt)
    R = np.eye(3)
    t = np.zeros(3)
    best = RigidTransform(R, t)
    best_res = np.inf
    last_res = np.inf
    for it in range(max_iters):
        moved = src @ R.T + t
        ids, dists = index.knn_batch(moved, 1)
        res = float(dists[:, 0].mean())
        if res < best_res:
            best_res = res
            best = RigidTransform(R, t)
        if last_res - res < tol:
            break
        last_res = res
        try:
            fit = procrustes(src, tgt[ids[:, 0]])
        except DegenerateGeometryError:
            break
        R, t = fit.R, fit.t
    return best


def icp_residual_trace(src, tgt, max_iters: int = 50):
    """Mean matched distance per iteration (diagnostic for the baseline)."""
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    index = build_index(tgt)
    R = np.eye(3)
    t = np.zeros(3)
    trace = []
    for _ in range(max_iters):
        moved = src @ R.T + t
        ids, dists = index.knn_batch(moved, 1)
        trace.append(float(dists[:, 0].mean()))
        try:
            fit = procrustes(src, tgt[ids[:, 0]])
        except DegenerateGeometryError:
            break
        R, t = fit.R, fit.t
    return trace
