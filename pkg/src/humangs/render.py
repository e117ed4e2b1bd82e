"""Gaussian splatting: EWA projection, depth-sorted alpha compositing, analytic backward.

Pixel (row i, col j) is sampled at image coordinates (j + 0.5, i + 0.5).
A splat contributes ``alpha' = min(0.99, opacity * exp(-d^T cov2d^-1 d / 2))``
inside its 3-sigma ellipse and nothing outside.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .gaussians import (
    GaussianCloud,
    normalize_backward,
    quat_normalize,
    rotation_matrix_grad_to_quat,
    sh_basis,
    sigmoid,
    _rotation_matrix,
)

NEAR_PLANE = 0.01
COV2D_DILATION = 0.3
ALPHA_MAX = 0.99
SUPPORT_SIGMA = 3.0
MIN_TRANSMITTANCE = 1e-4
TILE_SIZE = 16


class StaleCacheError(RuntimeError):
    """render_backward was handed a cache from a different forward pass."""


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.width = int(self.width)
        self.height = int(self.height)
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        r = self.rotation
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6 or np.linalg.det(r) <= 0:
            raise ValueError("world_to_camera rotation must be orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def with_size(self, width: int, height: int) -> "Camera":
        sx, sy = width / self.width, height / self.height
        return Camera(width, height, self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                      self.world_to_camera.copy())


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """world_to_camera for a +z-forward, +y-down (image rows) camera at ``eye``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = -r @ eye
    return m


# --------------------------------------------------------------------------
# projection


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    visible: bool


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities plus what the backward pass needs."""

    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray  # (N, 3): a, b, c of the inverse 2D covariance
    depths: np.ndarray
    radii: np.ndarray
    visible: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    # backward intermediates
    cam_points: np.ndarray
    jac: np.ndarray
    cov3d: np.ndarray
    rot: np.ndarray
    unit_quats: np.ndarray
    scales: np.ndarray
    view_dirs: np.ndarray
    view_offsets: np.ndarray
    sh_basis: np.ndarray
    color_raw: np.ndarray


def project_cloud(cloud: GaussianCloud, cam: Camera) -> Projection:
    n = len(cloud)
    W = cam.rotation
    t = cloud.positions @ W.T + cam.translation
    depth = t[:, 2]
    visible = depth > NEAR_PLANE
    z = np.where(visible, depth, 1.0)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * t[:, 0] / z ** 2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * t[:, 1] / z ** 2
    uq = quat_normalize(cloud.rotations) if n else cloud.rotations.copy()
    rot = _rotation_matrix(uq)
    scales = np.exp(cloud.log_scales)
    cov3d = (rot * (scales ** 2)[:, None, :]) @ np.swapaxes(rot, 1, 2)
    T = jac @ W
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2) + COV2D_DILATION * np.eye(2)
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    visible &= det > 0
    det = np.where(det > 0, det, 1.0)
    conics = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid ** 2 - det, 0.0))
    radii = SUPPORT_SIGMA * np.sqrt(lam)
    means2d = np.stack([cam.fx * t[:, 0] / z + cam.cx, cam.fy * t[:, 1] / z + cam.cy], axis=1)
    offsets = cloud.positions - cam.center
    dist = np.linalg.norm(offsets, axis=1, keepdims=True)
    dirs = offsets / np.where(dist > 0, dist, 1.0)
    basis = sh_basis(dirs, cloud.sh_degree) if n else np.zeros((0, cloud.sh.shape[1]))
    raw = np.einsum("nk,nkc->nc", basis, cloud.sh) + 0.5
    return Projection(
        means2d, cov2d, conics, depth, radii, visible, np.clip(raw, 0.0, 1.0), sigmoid(cloud.opacity_logits),
        t, jac, cov3d, rot, uq, scales, dirs, offsets, basis, raw,
    )


def project_gaussian(g, cam: Camera) -> ProjectedGaussian:
    """Project one Gaussian; points at or behind the near plane come back with visible=False."""
    cloud = GaussianCloud(g.position[None], g.rotation[None], g.log_scale[None], [g.opacity_logit], g.sh[None])
    p = project_cloud(cloud, cam)
    return ProjectedGaussian(p.means2d[0], p.cov2d[0], float(p.depths[0]), bool(p.visible[0]))


def depth_sort(depths) -> np.ndarray:
    """Ascending depth, ties by ascending index."""
    return np.argsort(np.asarray(depths, dtype=np.float64), kind="stable")


# --------------------------------------------------------------------------
# forward


@dataclass
class TileRecord:
    rows: np.ndarray  # pixel rows of this tile (flattened)
    cols: np.ndarray
    ids: np.ndarray  # gaussian indices in depth order
    alpha: np.ndarray  # (P, M) effective alpha after cutoff / clamp / termination
    trans: np.ndarray  # (P, M) transmittance before each splat
    gauss: np.ndarray  # (P, M) exp(power) inside support, 0 outside
    raw: np.ndarray  # (P, M) opacity * gauss before clamping
    dx: np.ndarray
    dy: np.ndarray
    active: np.ndarray  # (P, M) bool: contributes and is not clamped


@dataclass
class RenderCache:
    projection: Projection
    tiles: list[TileRecord]
    background: np.ndarray
    fingerprint: bytes
    order: np.ndarray

    def support_signature(self) -> bytes:
        """Digest of every discrete choice made in the forward pass (order, support, clamps)."""
        h = hashlib.blake2b(digest_size=16)
        h.update(self.order.tobytes())
        h.update(self.projection.visible.tobytes())
        clamp = (self.projection.color_raw > 0) & (self.projection.color_raw < 1)
        h.update(clamp.tobytes())
        for t in self.tiles:
            h.update(t.ids.tobytes())
            h.update((t.alpha > 0).tobytes())
            h.update(t.active.tobytes())
        return h.digest()


@dataclass
class RenderOutput:
    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    cache: RenderCache | None = None


def _fingerprint(cloud: GaussianCloud, cam: Camera, background: np.ndarray) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for a in GaussianCloud.ATTRIBUTES:
        h.update(np.ascontiguousarray(getattr(cloud, a)).tobytes())
    h.update(np.array([cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy], dtype=np.float64).tobytes())
    h.update(cam.world_to_camera.tobytes())
    h.update(background.tobytes())
    return h.digest()


def _check_image(cam: Camera) -> None:
    if cam.width <= 0 or cam.height <= 0:
        raise ValueError("cannot render a zero-sized image")


def _composite_tile(proj: Projection, ids: np.ndarray, rows: np.ndarray, cols: np.ndarray, early_stop: bool):
    px = cols + 0.5
    py = rows + 0.5
    dx = px[:, None] - proj.means2d[ids, 0][None, :]
    dy = py[:, None] - proj.means2d[ids, 1][None, :]
    a, b, c = proj.conics[ids, 0], proj.conics[ids, 1], proj.conics[ids, 2]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    inside = power >= -0.5 * SUPPORT_SIGMA ** 2
    gauss = np.where(inside, np.exp(np.minimum(power, 0.0)), 0.0)
    raw = proj.opacities[ids][None, :] * gauss
    alpha = np.minimum(raw, ALPHA_MAX)
    one_minus = 1.0 - alpha
    after = np.cumprod(one_minus, axis=1)
    if early_stop:
        keep = after >= MIN_TRANSMITTANCE
        alpha = np.where(keep, alpha, 0.0)
        one_minus = 1.0 - alpha
        after = np.cumprod(one_minus, axis=1)
    trans = np.empty_like(after)
    trans[:, 0] = 1.0
    trans[:, 1:] = after[:, :-1]
    active = (alpha > 0) & (raw < ALPHA_MAX)
    return alpha, trans, after, gauss, raw, dx, dy, active


def render(cloud: GaussianCloud, cam: Camera, background=(0.0, 0.0, 0.0), *, tile_size: int | None = TILE_SIZE,
           early_stop: bool = True, keep_cache: bool = True) -> RenderOutput:
    """Tile-based forward rasterisation.

    Args:
        tile_size: square tile edge in pixels; ``None`` treats the whole image as one tile.
        early_stop: stop compositing a pixel once transmittance would fall below 1e-4.
    """
    _check_image(cam)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    H, W = cam.height, cam.width
    proj = project_cloud(cloud, cam)
    order = depth_sort(proj.depths)
    order = order[proj.visible[order]]
    color = np.empty((H, W, 3))
    alpha_map = np.empty((H, W))
    depth_map = np.empty((H, W))
    tiles: list[TileRecord] = []
    ts_x = W if tile_size is None else tile_size
    ts_y = H if tile_size is None else tile_size
    nx, ny = -(-W // ts_x), -(-H // ts_y)
    m = proj.means2d[order]
    r = proj.radii[order]
    tx0 = np.floor((m[:, 0] - r - 0.5) / ts_x)
    tx1 = np.floor((m[:, 0] + r - 0.5) / ts_x)
    ty0 = np.floor((m[:, 1] - r - 0.5) / ts_y)
    ty1 = np.floor((m[:, 1] + r - 0.5) / ts_y)
    for ty in range(ny):
        row_hit = (ty0 <= ty) & (ty1 >= ty)
        for tx in range(nx):
            x0, y0 = tx * ts_x, ty * ts_y
            x1, y1 = min(x0 + ts_x, W), min(y0 + ts_y, H)
            rr, cc = np.meshgrid(np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
            rows, cols = rr.ravel(), cc.ravel()
            ids = order[row_hit & (tx0 <= tx) & (tx1 >= tx)]
            if len(ids) == 0:
                color[y0:y1, x0:x1] = bg
                alpha_map[y0:y1, x0:x1] = 0.0
                depth_map[y0:y1, x0:x1] = 0.0
                continue
            alpha, trans, after, gauss, raw, dx, dy, active = _composite_tile(proj, ids, rows, cols, early_stop)
            w = alpha * trans
            final = after[:, -1]
            pix = w @ proj.colors[ids] + final[:, None] * bg
            color[y0:y1, x0:x1] = pix.reshape(y1 - y0, x1 - x0, 3)
            alpha_map[y0:y1, x0:x1] = (1.0 - final).reshape(y1 - y0, x1 - x0)
            depth_map[y0:y1, x0:x1] = (w @ proj.depths[ids]).reshape(y1 - y0, x1 - x0)
            if keep_cache:
                tiles.append(TileRecord(rows, cols, ids, alpha, trans, gauss, raw, dx, dy, active))
    cache = RenderCache(proj, tiles, bg, _fingerprint(cloud, cam, bg), order) if keep_cache else None
    return RenderOutput(color, alpha_map, depth_map, cache)


def render_naive(cloud: GaussianCloud, cam: Camera, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Reference rasteriser: every pixel independently sorts and composites all splats.

    No tiling and no early termination; same projection, clamp and 3-sigma cutoff.
    """
    _check_image(cam)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    H, W = cam.height, cam.width
    proj = project_cloud(cloud, cam)
    vis = np.flatnonzero(proj.visible)
    mx, my = proj.means2d[vis, 0], proj.means2d[vis, 1]
    a, b, c = proj.conics[vis, 0], proj.conics[vis, 1], proj.conics[vis, 2]
    depths = proj.depths[vis]
    color = np.empty((H, W, 3))
    alpha_map = np.empty((H, W))
    depth_map = np.empty((H, W))
    for i in range(H):
        for j in range(W):
            dx = j + 0.5 - mx
            dy = i + 0.5 - my
            power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
            hit = np.flatnonzero(power >= -0.5 * SUPPORT_SIGMA ** 2)
            hit = hit[np.lexsort((vis[hit], depths[hit]))]
            T = 1.0
            col = np.zeros(3)
            dep = 0.0
            for k in hit:
                g = vis[k]
                alpha = min(proj.opacities[g] * np.exp(min(power[k], 0.0)), ALPHA_MAX)
                w = alpha * T
                col = col + w * proj.colors[g]
                dep += w * proj.depths[g]
                T = T * (1.0 - alpha)
            color[i, j] = col + T * bg
            alpha_map[i, j] = 1.0 - T
            depth_map[i, j] = dep
    return RenderOutput(color, alpha_map, depth_map, None)


# --------------------------------------------------------------------------
# backward


@dataclass
class CloudGradients:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    means2d: np.ndarray  # screen-space mean gradient, for densification statistics

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> "CloudGradients":
        n = len(cloud)
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros_like(cloud.sh), np.zeros((n, 2)))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {a: getattr(self, a) for a in GaussianCloud.ATTRIBUTES}


def render_backward(cloud: GaussianCloud, cam: Camera, grad_color, grad_alpha, cache: RenderCache) -> CloudGradients:
    """Analytic gradients of <grad_color, color> + <grad_alpha, alpha> w.r.t. every cloud attribute."""
    if cache is None:
        raise StaleCacheError("no forward cache: call render(..., keep_cache=True) first")
    if cache.fingerprint != _fingerprint(cloud, cam, cache.background):
        raise StaleCacheError("render cache does not belong to this cloud/camera")
    grad_color = np.asarray(grad_color, dtype=np.float64)
    grad_alpha = np.asarray(grad_alpha, dtype=np.float64)
    proj = cache.projection
    n = len(cloud)
    g_col = np.zeros((n, 3))
    g_op = np.zeros(n)
    g_mean = np.zeros((n, 2))
    g_con = np.zeros((n, 3))
    bg = cache.background
    for t in cache.tiles:
        gc = grad_color[t.rows, t.cols]  # (P, 3)
        ga = grad_alpha[t.rows, t.cols]
        w = t.alpha * t.trans
        cols = proj.colors[t.ids]
        g_col[t.ids] += w.T @ gc
        dot = gc @ cols.T  # (P, M)
        final = t.trans[:, -1] * (1.0 - t.alpha[:, -1])
        contrib = w * dot
        # suffix sums of later contributions (exclusive) + background term
        suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
        suffix += (final * (gc @ bg))[:, None]
        inv = 1.0 / (1.0 - t.alpha)
        g_alpha = t.trans * dot - suffix * inv + (ga * final)[:, None] * inv
        g_raw = np.where(t.active, g_alpha, 0.0)
        g_op[t.ids] += np.sum(g_raw * t.gauss, axis=0)
        g_pow = g_raw * t.raw
        a, b, c = proj.conics[t.ids, 0], proj.conics[t.ids, 1], proj.conics[t.ids, 2]
        g_mean[t.ids, 0] += np.sum(g_pow * (a * t.dx + b * t.dy), axis=0)
        g_mean[t.ids, 1] += np.sum(g_pow * (b * t.dx + c * t.dy), axis=0)
        g_con[t.ids, 0] += np.sum(g_pow * (-0.5 * t.dx * t.dx), axis=0)
        g_con[t.ids, 1] += np.sum(g_pow * (-t.dx * t.dy), axis=0)
        g_con[t.ids, 2] += np.sum(g_pow * (-0.5 * t.dy * t.dy), axis=0)
    return _project_backward(cloud, cam, proj, g_col, g_op, g_mean, g_con)


def _project_backward(cloud, cam, proj: Projection, g_col, g_op, g_mean, g_con) -> CloudGradients:
    out = CloudGradients.zeros_like(cloud)
    vis = proj.visible
    if not np.any(vis):
        return out
    # colour -> SH and view direction
    g_raw = np.where((proj.color_raw > 0) & (proj.color_raw < 1), g_col, 0.0)
    out.sh = np.einsum("nk,nc->nkc", proj.sh_basis, g_raw)
    g_pos = np.zeros((len(cloud), 3))
    if cloud.sh_degree > 0:
        _, dbasis = sh_basis(proj.view_dirs, cloud.sh_degree, with_grad=True)
        g_dir = np.einsum("nkd,nkc,nc->nd", dbasis, cloud.sh, g_raw)
        g_pos += normalize_backward(proj.view_offsets, g_dir)
    # opacity
    op = proj.opacities
    out.opacity_logits = g_op * op * (1.0 - op)
    # conic -> 2D covariance
    K = np.empty((len(cloud), 2, 2))
    K[:, 0, 0], K[:, 0, 1], K[:, 1, 0], K[:, 1, 1] = proj.conics[:, 0], proj.conics[:, 1], proj.conics[:, 1], proj.conics[:, 2]
    Gk = np.empty_like(K)
    Gk[:, 0, 0], Gk[:, 1, 1] = g_con[:, 0], g_con[:, 2]
    Gk[:, 0, 1] = Gk[:, 1, 0] = 0.5 * g_con[:, 1]
    g_cov2 = -K @ Gk @ K
    # cov2d = T cov3d T^T, T = J W
    Wr = cam.rotation
    T = proj.jac @ Wr
    g_cov3 = np.swapaxes(T, 1, 2) @ g_cov2 @ T
    g_T = 2.0 * g_cov2 @ T @ proj.cov3d
    g_J = g_T @ Wr.T
    t = proj.cam_points
    z = np.where(vis, t[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy
    g_t = np.zeros((len(cloud), 3))
    g_t[:, 0] = g_mean[:, 0] * fx / z - g_J[:, 0, 2] * fx / z ** 2
    g_t[:, 1] = g_mean[:, 1] * fy / z - g_J[:, 1, 2] * fy / z ** 2
    g_t[:, 2] = (
        -g_mean[:, 0] * fx * t[:, 0] / z ** 2 - g_mean[:, 1] * fy * t[:, 1] / z ** 2
        - g_J[:, 0, 0] * fx / z ** 2 + g_J[:, 0, 2] * 2 * fx * t[:, 0] / z ** 3
        - g_J[:, 1, 1] * fy / z ** 2 + g_J[:, 1, 2] * 2 * fy * t[:, 1] / z ** 3
    )
    g_pos += g_t @ Wr
    # cov3d = R S^2 R^T
    R, s2 = proj.rot, proj.scales ** 2
    g_ls = 2.0 * s2 * np.einsum("nak,nab,nbk->nk", R, g_cov3, R)
    g_R = 2.0 * g_cov3 @ R * s2[:, None, :]
    g_q = normalize_backward(cloud.rotations, rotation_matrix_grad_to_quat(proj.unit_quats, g_R))
    mask = vis[:, None]
    out.positions = np.where(mask, g_pos, 0.0)
    out.log_scales = np.where(mask, g_ls, 0.0)
    out.rotations = np.where(mask, g_q, 0.0)
    out.opacity_logits = np.where(vis, out.opacity_logits, 0.0)
    out.sh = np.where(vis[:, None, None], out.sh, 0.0)
    out.means2d = np.where(mask[:, :1], g_mean, 0.0)
    return out
