"""Gaussian cloud containers plus the quaternion, covariance and SH math.

Quaternions are stored as (w, x, y, z) and composed with the Hamilton
product. Scales are stored as logs and opacities as logits; activated values
are always ``exp(log_scale)`` and ``sigmoid(opacity_logit)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

INITIAL_OPACITY = 0.1


class DegenerateQuaternionError(ValueError):
    pass


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so large |x| never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


# --------------------------------------------------------------------------
# quaternions


def quat_normalize(q, eps: float = 1e-12) -> np.ndarray:
    """Scale quaternion(s) to unit norm; raises on near-zero input."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= eps):
        raise DegenerateQuaternionError("cannot normalize a quaternion with norm <= %g" % eps)
    return q / n


def quat_multiply(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q) -> np.ndarray:
    q = np.array(q, dtype=np.float64)
    q[..., 1:] *= -1.0
    return q


def quat_left_matrix(a) -> np.ndarray:
    """Matrix L(a) with ``quat_multiply(a, b) == L(a) @ b``."""
    a = np.asarray(a, dtype=np.float64)
    w, x, y, z = np.moveaxis(a, -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_right_matrix(b) -> np.ndarray:
    """Matrix R(b) with ``quat_multiply(a, b) == R(b) @ a``."""
    b = np.asarray(b, dtype=np.float64)
    w, x, y, z = np.moveaxis(b, -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def _rotation_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_to_matrix(q, tol: float = 1e-6) -> np.ndarray:
    """Rotation matrix of unit quaternion(s). Non-unit input is rejected."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1.0) > tol):
        raise ValueError("quat_to_matrix expects unit quaternions (|q| - 1 > %g)" % tol)
    return _rotation_matrix(q)


def rotation_matrix_grad_to_quat(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull back dL/dR (..., 3, 3) to dL/dq for the un-normalized formula."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    G = g
    gw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
              - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    gx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2 * x * G[..., 1, 1]
              - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    gy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0]
              + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    gz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0]
              - 2 * z * G[..., 1, 1] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def normalize_backward(raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Gradient through ``u = raw / |raw|`` along the last axis."""
    n = np.linalg.norm(raw, axis=-1, keepdims=True)
    u = raw / n
    return (grad_unit - u * np.sum(u * grad_unit, axis=-1, keepdims=True)) / n


def matrix_to_quat(m) -> np.ndarray:
    """Unit quaternion (w >= 0) for rotation matrix/matrices; Shepperd's method."""
    m = np.asarray(m, dtype=np.float64)
    r = m.reshape(-1, 3, 3)
    r00, r01, r02 = r[:, 0, 0], r[:, 0, 1], r[:, 0, 2]
    r10, r11, r12 = r[:, 1, 0], r[:, 1, 1], r[:, 1, 2]
    r20, r21, r22 = r[:, 2, 0], r[:, 2, 1], r[:, 2, 2]
    tr = r00 + r11 + r22
    pick = np.argmax(np.stack([tr, r00, r11, r22], axis=1), axis=1)
    cand = np.empty((4, r.shape[0], 4))
    with np.errstate(divide="ignore", invalid="ignore"):
        s = 2.0 * np.sqrt(np.maximum(1.0 + tr, 1e-300))
        cand[0] = np.stack([0.25 * s, (r21 - r12) / s, (r02 - r20) / s, (r10 - r01) / s], 1)
        s = 2.0 * np.sqrt(np.maximum(1.0 + r00 - r11 - r22, 1e-300))
        cand[1] = np.stack([(r21 - r12) / s, 0.25 * s, (r01 + r10) / s, (r02 + r20) / s], 1)
        s = 2.0 * np.sqrt(np.maximum(1.0 + r11 - r00 - r22, 1e-300))
        cand[2] = np.stack([(r02 - r20) / s, (r01 + r10) / s, 0.25 * s, (r12 + r21) / s], 1)
        s = 2.0 * np.sqrt(np.maximum(1.0 + r22 - r00 - r11, 1e-300))
        cand[3] = np.stack([(r10 - r01) / s, (r02 + r20) / s, (r12 + r21) / s, 0.25 * s], 1)
    out = cand[pick, np.arange(r.shape[0])]
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    out[out[:, 0] < 0] *= -1.0
    return out.reshape(m.shape[:-2] + (4,))


def axis_angle_to_quat(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


# --------------------------------------------------------------------------
# covariance


def build_covariance(log_scale, q) -> np.ndarray:
    """Sigma = R diag(exp(log_scale))^2 R^T for one or many Gaussians."""
    log_scale = np.asarray(log_scale, dtype=np.float64)
    R = quat_to_matrix(q)
    s2 = np.exp(2.0 * log_scale)
    return (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)


# --------------------------------------------------------------------------
# spherical harmonics


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_count(k: int) -> int:
    d = int(round(np.sqrt(k))) - 1
    if d < 0 or d > 3 or (d + 1) ** 2 != k:
        raise ValueError(f"{k} SH coefficients do not correspond to a degree in 0..3")
    return d


def sh_basis(dirs, degree: int, with_grad: bool = False):
    """Real SH basis values (N, K) at unit directions (N, 3).

    With ``with_grad`` also returns d(basis)/d(dir) as (N, K, 3).
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = dirs.shape[0]
    K = sh_coeff_count(degree)
    b = np.zeros((n, K))
    d = np.zeros((n, K, 3)) if with_grad else None
    b[:, 0] = SH_C0
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        b[:, 1] = -SH_C1 * y
        b[:, 2] = SH_C1 * z
        b[:, 3] = -SH_C1 * x
        if with_grad:
            d[:, 1, 1] = -SH_C1
            d[:, 2, 2] = SH_C1
            d[:, 3, 0] = -SH_C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        c = SH_C2
        b[:, 4] = c[0] * xy
        b[:, 5] = c[1] * yz
        b[:, 6] = c[2] * (2 * zz - xx - yy)
        b[:, 7] = c[3] * xz
        b[:, 8] = c[4] * (xx - yy)
        if with_grad:
            d[:, 4] = np.stack([c[0] * y, c[0] * x, 0 * x], 1)
            d[:, 5] = np.stack([0 * x, c[1] * z, c[1] * y], 1)
            d[:, 6] = np.stack([-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z], 1)
            d[:, 7] = np.stack([c[3] * z, 0 * x, c[3] * x], 1)
            d[:, 8] = np.stack([2 * c[4] * x, -2 * c[4] * y, 0 * x], 1)
    if degree >= 3:
        c = SH_C3
        b[:, 9] = c[0] * y * (3 * xx - yy)
        b[:, 10] = c[1] * xy * z
        b[:, 11] = c[2] * y * (4 * zz - xx - yy)
        b[:, 12] = c[3] * z * (2 * zz - 3 * xx - 3 * yy)
        b[:, 13] = c[4] * x * (4 * zz - xx - yy)
        b[:, 14] = c[5] * z * (xx - yy)
        b[:, 15] = c[6] * x * (xx - 3 * yy)
        if with_grad:
            zero = 0 * x
            d[:, 9] = np.stack([6 * c[0] * xy, c[0] * (3 * xx - 3 * yy), zero], 1)
            d[:, 10] = np.stack([c[1] * yz, c[1] * xz, c[1] * xy], 1)
            d[:, 11] = np.stack([-2 * c[2] * xy, c[2] * (4 * zz - xx - 3 * yy), 8 * c[2] * yz], 1)
            d[:, 12] = np.stack([-6 * c[3] * xz, -6 * c[3] * yz, c[3] * (6 * zz - 3 * xx - 3 * yy)], 1)
            d[:, 13] = np.stack([c[4] * (4 * zz - 3 * xx - yy), -2 * c[4] * xy, 8 * c[4] * xz], 1)
            d[:, 14] = np.stack([2 * c[5] * xz, -2 * c[5] * yz, c[5] * (xx - yy)], 1)
            d[:, 15] = np.stack([c[6] * (3 * xx - 3 * yy), -6 * c[6] * xy, zero], 1)
    if with_grad:
        return b, d
    return b


def sh_to_color(sh, view_dir) -> np.ndarray:
    """Evaluate SH colour(s) for unit view direction(s), offset by +0.5 and clamped to [0, 1].

    ``sh`` is (K, 3) for a single Gaussian or (N, K, 3) for many.
    """
    sh = np.asarray(sh, dtype=np.float64)
    single = sh.ndim == 2
    sh = sh[None] if single else sh
    dirs = np.broadcast_to(np.atleast_2d(view_dir), (sh.shape[0], 3))
    basis = sh_basis(dirs, sh_degree_from_count(sh.shape[1]))
    rgb = np.clip(np.einsum("nk,nkc->nc", basis, sh) + 0.5, 0.0, 1.0)
    return rgb[0] if single else rgb


def rgb_to_sh_dc(rgb) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# --------------------------------------------------------------------------
# containers


class Space(str, enum.Enum):
    CANONICAL = "canonical"
    DEFORMED = "deformed"
    POSED = "posed"
    WORLD = "world"


@dataclass
class Gaussian:
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.log_scale, self.rotation)


@dataclass
class GaussianCloud:
    """Structure-of-arrays storage for N Gaussians.

    Attributes:
        positions: (N, 3)
        rotations: (N, 4) unit quaternions (w, x, y, z)
        log_scales: (N, 3)
        opacity_logits: (N,)
        sh: (N, K, 3) colour coefficients, K = (degree + 1)^2
        space: which coordinate frame the positions live in
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    space: Space = Space.WORLD

    ATTRIBUTES = ("positions", "rotations", "log_scales", "opacity_logits", "sh")

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh, dtype=np.float64)
        if sh.size == 0:
            self.sh = sh.reshape(n, max(sh.shape[1] if sh.ndim == 3 else 1, 1), 3)
        else:
            self.sh = sh.reshape(n, -1, 3)
        sh_degree_from_count(self.sh.shape[1])
        self.space = Space(self.space)

    @classmethod
    def empty(cls, sh_degree: int = 0, space: Space = Space.WORLD) -> "GaussianCloud":
        k = sh_coeff_count(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, k, 3)), space)

    @classmethod
    def from_points(cls, points, colors=None, log_scale=None, opacity: float = INITIAL_OPACITY,
                    sh_degree: int = 0, space: Space = Space.WORLD) -> "GaussianCloud":
        """Isotropic Gaussians at ``points``; scale from 3-NN spacing when not given."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        if log_scale is None:
            log_scale = knn_log_scale(points)
        log_scales = np.broadcast_to(np.asarray(log_scale, dtype=np.float64).reshape(-1, 1), (n, 3)).copy()
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        sh = np.zeros((n, sh_coeff_count(sh_degree), 3))
        if colors is not None:
            sh[:, 0, :] = rgb_to_sh_dc(np.asarray(colors, dtype=np.float64).reshape(n, 3))
        return cls(points.copy(), rot, log_scales, np.full(n, logit(opacity)), sh, space)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_count(self.sh.shape[1])

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, a).copy() for a in self.ATTRIBUTES), space=self.space)

    def with_space(self, space: Space) -> "GaussianCloud":
        return replace(self.copy(), space=Space(space))

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, a)[index] for a in self.ATTRIBUTES), space=self.space)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i].copy(), self.rotations[i].copy(), self.log_scales[i].copy(),
                        float(self.opacity_logits[i]), self.sh[i].copy())

    @classmethod
    def from_gaussians(cls, items, space: Space = Space.WORLD) -> "GaussianCloud":
        items = list(items)
        return cls(
            np.array([g.position for g in items]).reshape(-1, 3),
            np.array([g.rotation for g in items]).reshape(-1, 4),
            np.array([g.log_scale for g in items]).reshape(-1, 3),
            np.array([g.opacity_logit for g in items], dtype=np.float64),
            np.array([g.sh for g in items]).reshape(len(items), -1, 3) if items else np.zeros((0, 1, 3)),
            space,
        )

    @staticmethod
    def concat(clouds, space: Space | None = None) -> "GaussianCloud":
        clouds = list(clouds)
        degrees = {c.sh_degree for c in clouds}
        if len(degrees) > 1:
            raise ValueError(f"cannot concatenate clouds with SH degrees {sorted(degrees)}")
        return GaussianCloud(
            *(np.concatenate([getattr(c, a) for c in clouds]) for a in GaussianCloud.ATTRIBUTES),
            space=space if space is not None else clouds[0].space,
        )

    def quantized(self) -> "GaussianCloud":
        """Copy with every attribute rounded through float32 (checkpoint precision)."""
        return GaussianCloud(
            *(getattr(self, a).astype(np.float32).astype(np.float64) for a in self.ATTRIBUTES),
            space=self.space,
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, a))) for a in self.ATTRIBUTES)


# --------------------------------------------------------------------------
# initialisation from a mesh


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)


@dataclass
class SurfaceSamples:
    """Sampled points with barycentric provenance (vertex ids + weights)."""

    points: np.ndarray
    vertex_ids: np.ndarray
    barycentric: np.ndarray

    def interpolate(self, per_vertex: np.ndarray) -> np.ndarray:
        return np.einsum("nk,nk...->n...", self.barycentric, per_vertex[self.vertex_ids])


def sample_mesh_surface(mesh: Mesh, count: int, seed: int = 0) -> SurfaceSamples:
    """Take mesh vertices first, then area-weighted surface samples for the remainder.

    ``count == len(vertices)`` returns the vertex set in order.
    """
    nv = len(mesh.vertices)
    if nv == 0:
        raise ValueError("cannot sample an empty mesh")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    if count <= nv:
        ids = np.arange(nv) if count == nv else np.sort(rng.choice(nv, size=count, replace=False))
        vid = np.zeros((count, 3), dtype=np.int64)
        vid[:, 0] = ids
        bary = np.zeros((count, 3))
        bary[:, 0] = 1.0
        return SurfaceSamples(mesh.vertices[ids].copy(), vid, bary)
    extra = count - nv
    vid = np.zeros((nv, 3), dtype=np.int64)
    vid[:, 0] = np.arange(nv)
    bary = np.zeros((nv, 3))
    bary[:, 0] = 1.0
    if len(mesh.faces):
        tri = mesh.vertices[mesh.faces]
        area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        prob = area / area.sum() if area.sum() > 0 else np.full(len(area), 1.0 / len(area))
        fid = rng.choice(len(mesh.faces), size=extra, p=prob)
        u, v = rng.random(extra), rng.random(extra)
        flip = u + v > 1.0
        u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
        fb = np.stack([1.0 - u - v, u, v], axis=1)
        fv = mesh.faces[fid]
    else:
        # point-only mesh: repeat vertices
        fv = np.zeros((extra, 3), dtype=np.int64)
        fv[:, 0] = rng.integers(0, nv, size=extra)
        fb = np.zeros((extra, 3))
        fb[:, 0] = 1.0
    vid = np.concatenate([vid, fv])
    bary = np.concatenate([bary, fb])
    pts = np.einsum("nk,nkd->nd", bary, mesh.vertices[vid])
    return SurfaceSamples(pts, vid, bary)


def knn_log_scale(points: np.ndarray, k: int = 3) -> np.ndarray:
    """log of the mean distance to the k nearest other points (per point)."""
    n = len(points)
    if n < 2:
        return np.full(n, np.log(0.01))
    kk = min(k, n - 1)
    dist, _ = cKDTree(points).query(points, k=kk + 1)
    mean = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    return np.log(mean)


def sample_cloud_from_mesh(mesh: Mesh, count: int, seed: int = 0, sh_degree: int = 0) -> GaussianCloud:
    samples = sample_mesh_surface(mesh, count, seed)
    return GaussianCloud.from_points(samples.points, sh_degree=sh_degree, space=Space.CANONICAL)
