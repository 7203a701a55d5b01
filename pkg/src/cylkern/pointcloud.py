"""Point clouds, meshes, rigid transforms and synthetic shape generation.

All geometry is 64-bit floating point. PointCloud values are immutable
after construction (arrays are frozen) and safe to share between workers.
Normals are unit vectors whose *sign carries no meaning*; downstream code
must be sign-invariant, and the canonicalization applied by
``estimate_normals`` exists only to make tests deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, ParameterError

_UNIT_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PointCloud:
    """N points with optional unit normals and integer labels.

    N = 0 is representable (the result of sampling zero points) but every
    geometric operation in this package requires N >= 1 and raises
    ParameterError on an empty cloud.
    """

    points: np.ndarray                 # (N, 3) float64
    normals: np.ndarray | None = None  # (N, 3) float64, unit rows
    labels: np.ndarray | None = None   # (N,) int64

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ParameterError(f"points must be (N, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ParameterError("points contain NaN/Inf")
        object.__setattr__(self, "points", _frozen(pts))
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ParameterError("normals shape must match points")
            lens = np.linalg.norm(nrm, axis=1)
            if not np.all(np.abs(lens - 1.0) <= _UNIT_TOL):
                raise ParameterError("normals must be unit length within 1e-9")
            object.__setattr__(self, "normals", _frozen(nrm))
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (pts.shape[0],):
                raise ParameterError("labels must be (N,)")
            object.__setattr__(self, "labels", _frozen(lab))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle mesh, the carrier for OFF files before sampling."""

    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray     # (F, 3) int64

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        faces = np.asarray(self.faces, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise ParameterError("vertices must be (V, 3)")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ParameterError("faces must be (F, 3)")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise ParameterError("face index out of range")
        if faces.size:
            a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
            if np.any((a == b) | (b == c) | (a == c)):
                raise ParameterError("degenerate face with repeated indices")
        object.__setattr__(self, "vertices", _frozen(verts))
        object.__setattr__(self, "faces", _frozen(faces))


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (det = +1) plus translation."""

    R: np.ndarray  # (3, 3)
    t: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ParameterError("RigidTransform needs R (3,3) and t (3,)")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9:
            raise ParameterError("R is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ParameterError("det(R) must be +1 within 1e-9")
        object.__setattr__(self, "R", _frozen(R))
        object.__setattr__(self, "t", _frozen(t))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying ``other`` first, then ``self``."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)


def apply_rigid(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    """Map points through R p + t; normals rotate without translation.

    Rotation keeps normal norms within a couple of ulp, comfortably inside
    the unit-length invariant, so normals are not renormalized.
    """
    pts = cloud.points @ transform.R.T + transform.t
    nrm = None if cloud.normals is None else cloud.normals @ transform.R.T
    return PointCloud(pts, nrm, cloud.labels)


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the farthest point has norm 1."""
    if len(cloud) < 1:
        raise ParameterError("cannot normalize an empty cloud")
    pts = cloud.points - cloud.points.mean(axis=0)
    radius = np.linalg.norm(pts, axis=1).max()
    if radius > 0.0:
        pts = pts / radius
    return PointCloud(pts, cloud.normals, cloud.labels)


def rotation_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ParameterError("rotation axis must be nonzero")
    x, y, z = axis / n
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)


def random_rotation(max_angle_deg: float, seed: int,
                    with_translation: bool = False) -> RigidTransform:
    """Rotation of angle uniform in [0, max_angle_deg] about a uniform axis.

    Translation, when requested, is uniform in [-0.5, 0.5]^3.
    """
    if not 0.0 <= max_angle_deg <= 180.0:
        raise ParameterError("max_angle_deg must be in [0, 180]")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    v = rng.standard_normal(3)
    while np.linalg.norm(v) < 1e-12:
        v = rng.standard_normal(3)
    angle = np.deg2rad(rng.uniform(0.0, max_angle_deg))
    R = rotation_from_axis_angle(v, angle) if max_angle_deg > 0 else np.eye(3)
    t = rng.uniform(-0.5, 0.5, size=3) if with_translation else np.zeros(3)
    return RigidTransform(R, t)


def rotation_angle_deg(R: np.ndarray) -> float:
    """Geodesic rotation angle of a rotation matrix, in degrees."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def estimate_normals(cloud: PointCloud, k: int) -> PointCloud:
    """PCA normals: eigenvector of the smallest covariance eigenvalue.

    The produced sign is canonical (the first component of magnitude
    above 1e-12 is made positive) purely for determinism; it is not
    semantically meaningful.
    """
    n = len(cloud)
    if not 3 <= k <= n:
        raise ParameterError(f"k must satisfy 3 <= k <= N, got k={k}, N={n}")
    from .spatial import build_index

    index = build_index(cloud.points)
    ids, _ = index.knn_batch(cloud.points, k)
    nbrs = cloud.points[ids]                       # (N, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]                        # smallest eigenvalue first
    comp = np.where(np.abs(normals[:, 0]) > 1e-12, normals[:, 0],
                    np.where(np.abs(normals[:, 1]) > 1e-12, normals[:, 1],
                             normals[:, 2]))
    normals = normals * np.where(comp < 0.0, -1.0, 1.0)[:, None]
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(cloud.points, normals, cloud.labels)


def sample_mesh(mesh: TriangleMesh, n: int, seed: int) -> PointCloud:
    """Area-uniform surface sampling with face normals."""
    if n < 0:
        raise ParameterError("n must be >= 0")
    v = mesh.vertices
    f = mesh.faces
    if len(f) == 0:
        raise DegenerateGeometryError("mesh has no faces")
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    cross = np.cross(e1, e2)
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if total <= 0.0:
        raise DegenerateGeometryError("mesh has zero total area")
    if n == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    tri = rng.choice(len(f), size=n, p=areas / total)
    u = rng.random(n)
    w = rng.random(n)
    over = u + w > 1.0
    u[over] = 1.0 - u[over]
    w[over] = 1.0 - w[over]
    pts = v[f[tri, 0]] + u[:, None] * e1[tri] + w[:, None] * e2[tri]
    nrm = cross[tri] / np.linalg.norm(cross[tri], axis=1, keepdims=True)
    return PointCloud(pts, nrm)


SHAPE_IDS = {"sphere": 0, "cube": 1, "cylinder": 2, "torus": 3, "composite": 4}


def _sphere(rng, n):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v.copy(), v.copy()


def _cube(rng, n, half=1.0):
    face = rng.integers(0, 6, size=n)
    axis = face // 2
    side = np.where(face % 2 == 0, 1.0, -1.0)
    uv = rng.uniform(-half, half, size=(n, 2))
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    others = [(1, 2), (0, 2), (0, 1)]
    for a in range(3):
        m = axis == a
        pts[m, a] = side[m] * half
        o1, o2 = others[a]
        pts[m, o1] = uv[m, 0]
        pts[m, o2] = uv[m, 1]
        nrm[m, a] = side[m]
    return pts, nrm


def _cylinder(rng, n, radius=1.0, half_height=1.0):
    lateral = 2.0 * np.pi * radius * (2.0 * half_height)
    caps = 2.0 * np.pi * radius ** 2
    on_side = rng.random(n) < lateral / (lateral + caps)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    m = on_side
    pts[m, 0] = radius * np.cos(theta[m])
    pts[m, 1] = radius * np.sin(theta[m])
    pts[m, 2] = rng.uniform(-half_height, half_height, size=int(m.sum()))
    nrm[m, 0] = np.cos(theta[m])
    nrm[m, 1] = np.sin(theta[m])
    m = ~on_side
    r = radius * np.sqrt(rng.random(int(m.sum())))
    top = rng.random(int(m.sum())) < 0.5
    pts[m, 0] = r * np.cos(theta[m])
    pts[m, 1] = r * np.sin(theta[m])
    pts[m, 2] = np.where(top, half_height, -half_height)
    nrm[m, 2] = np.where(top, 1.0, -1.0)
    return pts, nrm


def _torus(rng, n, major=1.0, minor=0.3):
    # surface-uniform: accept tube angle v with probability prop. to R + r cos v
    u = rng.uniform(0.0, 2.0 * np.pi, size=n)
    v = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.uniform(0.0, 2.0 * np.pi, size=2 * (n - filled))
        acc = rng.random(cand.size) < (major + minor * np.cos(cand)) / (major + minor)
        take = cand[acc][: n - filled]
        v[filled:filled + take.size] = take
        filled += take.size
    cu, su = np.cos(u), np.sin(u)
    cv, sv = np.cos(v), np.sin(v)
    pts = np.stack([(major + minor * cv) * cu,
                    (major + minor * cv) * su,
                    minor * sv], axis=1)
    nrm = np.stack([cv * cu, cv * su, sv], axis=1)
    return pts, nrm


def _composite(rng, n):
    # sphere of radius 0.5 at (-0.5,0,0) next to a cube of half-extent 0.4 at (0.5,0,0)
    a_sphere = 4.0 * np.pi * 0.5 ** 2
    a_cube = 6.0 * 0.8 ** 2
    on_sphere = rng.random(n) < a_sphere / (a_sphere + a_cube)
    ns = int(on_sphere.sum())
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    if ns:
        p, v = _sphere(rng, ns)
        pts[on_sphere] = 0.5 * p + np.array([-0.5, 0.0, 0.0])
        nrm[on_sphere] = v
    if n - ns:
        p, v = _cube(rng, n - ns, half=0.4)
        pts[~on_sphere] = p + np.array([0.5, 0.0, 0.0])
        nrm[~on_sphere] = v
    return pts, nrm


def gen_synthetic(shape: str, n: int, noise_sigma: float, seed: int) -> PointCloud:
    """Sample n surface points of a named shape with analytic normals.

    Isotropic Gaussian noise of the given sigma is added to positions only.
    Deterministic per (shape, n, noise_sigma, seed). Labels carry the shape id.
    """
    if shape not in SHAPE_IDS:
        raise ParameterError(f"unknown shape {shape!r}; choose from {sorted(SHAPE_IDS)}")
    if n < 8:
        raise ParameterError("n must be >= 8")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    maker = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder,
             "torus": _torus, "composite": _composite}[shape]
    pts, nrm = maker(rng, n)
    if noise_sigma > 0.0:
        pts = pts + noise_sigma * rng.standard_normal((n, 3))
    labels = np.full(n, SHAPE_IDS[shape], dtype=np.int64)
    return PointCloud(pts, nrm, labels)
