"""Skeleton kinematics, linear blend skinning and non-rigid offsets."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussians import (
    Gaussian,
    GaussianCloud,
    Mesh,
    Space,
    axis_angle_to_quat,
    matrix_to_quat,
    normalize_backward,
    quat_left_matrix,
    quat_multiply,
    quat_normalize,
    quat_right_matrix,
    quat_to_matrix,
)

WEIGHT_EPS = 1e-8


class DegenerateBlendError(ValueError):
    """Blended skinning matrix is not orientation preserving."""


def rigid(rotation=None, translation=None) -> np.ndarray:
    m = np.eye(4)
    if rotation is not None:
        m[:3, :3] = rotation
    if translation is not None:
        m[:3, 3] = translation
    return m


def invert_rigid(m: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    r = m[..., :3, :3]
    out = np.broadcast_to(out, m.shape).copy()
    out[..., :3, :3] = np.swapaxes(r, -1, -2)
    out[..., :3, 3] = -np.einsum("...ji,...j->...i", r, m[..., :3, 3])
    return out


@dataclass
class Skeleton:
    parents: np.ndarray
    rest_local_transforms: np.ndarray
    shape_params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    joint_names: list[str] | None = None

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        self.rest_local_transforms = np.asarray(self.rest_local_transforms, dtype=np.float64).reshape(-1, 4, 4)
        self.shape_params = np.asarray(self.shape_params, dtype=np.float64).reshape(-1)
        n = len(self.parents)
        if n == 0:
            raise ValueError("skeleton needs at least one joint")
        if self.rest_local_transforms.shape[0] != n:
            raise ValueError("one rest transform per joint required")
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be a root")
        for j in range(1, n):
            if not (-1 <= self.parents[j] < j):
                raise ValueError(f"joint {j}: parent must precede it (got {self.parents[j]})")
        rot = self.rest_local_transforms[:, :3, :3]
        err = np.abs(rot @ np.swapaxes(rot, 1, 2) - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError("rest transforms must be rigid")
        if self.joint_names is not None and len(self.joint_names) != n:
            raise ValueError("joint_names length mismatch")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def rest_global_transforms(self) -> np.ndarray:
        g = np.empty_like(self.rest_local_transforms)
        for j, p in enumerate(self.parents):
            g[j] = self.rest_local_transforms[j] if p < 0 else g[p] @ self.rest_local_transforms[j]
        return g

    def joint_positions(self) -> np.ndarray:
        return self.rest_global_transforms()[:, :3, 3]


@dataclass
class PoseFrame:
    joint_rotations: np.ndarray
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    time: float = 0.0

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64).reshape(-1, 4)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        norms = np.linalg.norm(self.joint_rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("pose rotations must be unit quaternions")

    @classmethod
    def rest(cls, n_joints: int, time: float = 0.0) -> "PoseFrame":
        q = np.zeros((n_joints, 4))
        q[:, 0] = 1.0
        return cls(q, np.zeros(3), time)


def compute_bone_transforms(skeleton: Skeleton, pose: PoseFrame) -> np.ndarray:
    """Per-joint 4x4 transforms B_j taking rest-pose space to posed world space."""
    n = skeleton.n_joints
    if pose.joint_rotations.shape[0] != n:
        raise ValueError(f"pose has {pose.joint_rotations.shape[0]} rotations for {n} joints")
    local_rot = quat_to_matrix(pose.joint_rotations)
    posed = np.empty((n, 4, 4))
    root_shift = rigid(translation=pose.root_translation)
    for j, p in enumerate(skeleton.parents):
        local = skeleton.rest_local_transforms[j] @ rigid(local_rot[j])
        posed[j] = root_shift @ local if p < 0 else posed[p] @ local
    return posed @ invert_rigid(skeleton.rest_global_transforms())


# --------------------------------------------------------------------------
# skinning weights


@dataclass
class LbsWeightMatrix:
    base_weights: np.ndarray
    learned_logit_offsets: np.ndarray | None = None

    def __post_init__(self):
        self.base_weights = np.asarray(self.base_weights, dtype=np.float64)
        if self.base_weights.ndim != 2:
            raise ValueError("base_weights must be (N, n_joints)")
        if self.learned_logit_offsets is None:
            self.learned_logit_offsets = np.zeros_like(self.base_weights)
        self.learned_logit_offsets = np.asarray(self.learned_logit_offsets, dtype=np.float64)
        if self.learned_logit_offsets.shape != self.base_weights.shape:
            raise ValueError("offset shape must match base weights")
        if np.any(self.base_weights < 0):
            raise ValueError("base weights must be non-negative")

    @property
    def n_joints(self) -> int:
        return self.base_weights.shape[1]

    def __len__(self) -> int:
        return self.base_weights.shape[0]

    def subset(self, index) -> "LbsWeightMatrix":
        return LbsWeightMatrix(self.base_weights[index], self.learned_logit_offsets[index])

    def effective(self, extra_logits: np.ndarray | None = None) -> np.ndarray:
        logits = self.learned_logit_offsets if extra_logits is None else self.learned_logit_offsets + extra_logits
        return effective_weights(self.base_weights, logits)


def effective_weights(base: np.ndarray, offset_logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax(log(base + eps) + offsets)."""
    base = np.atleast_2d(base)
    if np.any(base.sum(axis=1) <= 0):
        raise ValueError("skinning weight row is all zero")
    z = np.log(base + WEIGHT_EPS) + offset_logits
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def lbs_effective_weights(w: LbsWeightMatrix, row: int) -> np.ndarray:
    return effective_weights(w.base_weights[row:row + 1], w.learned_logit_offsets[row:row + 1])[0]


def softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    return p * (grad_p - np.sum(p * grad_p, axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# LBS


def blend_transforms(weights: np.ndarray, bones: np.ndarray) -> np.ndarray:
    """A = sum_i w^i B_i, batched over leading weight rows."""
    return np.einsum("...j,jab->...ab", weights, bones)


def lbs_transform(x_d, weights, bones) -> np.ndarray:
    """x_p = sum_i w^i B_i x_d for one point or a batch (N, 3) with weights (N, J)."""
    x_d = np.asarray(x_d, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bones = np.asarray(bones, dtype=np.float64)
    if abs(weights.sum(axis=-1) - 1.0).max() > 1e-6:
        raise ValueError("skinning weights must sum to 1")
    a = blend_transforms(weights, bones)
    return np.einsum("...ab,...b->...a", a[..., :3, :3], x_d) + a[..., :3, 3]


def polar_rotation(a3: np.ndarray) -> np.ndarray:
    """Rotation factor of the polar decomposition for (..., 3, 3) matrices."""
    det = np.linalg.det(a3)
    if np.any(det <= 0):
        raise DegenerateBlendError("blended transform has non-positive determinant")
    u, _, vt = np.linalg.svd(a3)
    return u @ vt


def lbs_transform_gaussian(g: Gaussian, weights, bones) -> Gaussian:
    weights = np.asarray(weights, dtype=np.float64)
    a = blend_transforms(weights, np.asarray(bones, dtype=np.float64))
    pos = lbs_transform(g.position, weights, bones)
    rq = matrix_to_quat(polar_rotation(a[:3, :3]))
    rot = quat_normalize(quat_multiply(rq, g.rotation))
    return Gaussian(pos, rot, g.log_scale.copy(), g.opacity_logit, g.sh.copy())


@dataclass
class LbsTape:
    """Values kept from a batched LBS pass for the backward pass."""

    x_d: np.ndarray
    q_d: np.ndarray
    weights: np.ndarray
    blended: np.ndarray
    rot_quats: np.ndarray


def lbs_cloud(cloud: GaussianCloud, weights: np.ndarray, bones: np.ndarray) -> tuple[GaussianCloud, LbsTape]:
    """Skin every Gaussian of a deformed cloud; returns the posed cloud and its tape."""
    a = blend_transforms(weights, bones)
    pos = np.einsum("nab,nb->na", a[:, :3, :3], cloud.positions) + a[:, :3, 3]
    rq = matrix_to_quat(polar_rotation(a[:, :3, :3])) if len(cloud) else np.zeros((0, 4))
    rot = quat_normalize(quat_multiply(rq, cloud.rotations)) if len(cloud) else cloud.rotations.copy()
    posed = GaussianCloud(pos, rot, cloud.log_scales.copy(), cloud.opacity_logits.copy(), cloud.sh.copy(),
                          Space.POSED)
    return posed, LbsTape(cloud.positions, cloud.rotations, weights, a, rq)


def lbs_cloud_backward(tape: LbsTape, bones: np.ndarray, grad_pos: np.ndarray, grad_rot: np.ndarray):
    """Returns (grad x_d, grad q_d, grad weights).

    The polar rotation is held constant with respect to the weights; weight
    gradients flow through positions only.
    """
    a3 = tape.blended[:, :3, :3]
    g_xd = np.einsum("nab,na->nb", a3, grad_pos)
    # q_p = normalize(r ⊗ q_d); r ⊗ q_d is already unit, so the normalize Jacobian is the tangent projector
    prod = quat_multiply(tape.rot_quats, tape.q_d)
    g_prod = grad_rot - prod * np.sum(prod * grad_rot, axis=1, keepdims=True)
    g_qd = np.einsum("nab,na->nb", quat_left_matrix(tape.rot_quats), g_prod)
    # d x_p / d w_j = B_j x_d (homogeneous)
    bx = np.einsum("jab,nb->nja", bones[:, :3, :3], tape.x_d) + bones[None, :, :3, 3]
    g_w = np.einsum("nja,na->nj", bx, grad_pos)
    return g_xd, g_qd, g_w


# --------------------------------------------------------------------------
# non-rigid offsets


def apply_nonrigid(g: Gaussian, dx, ds, dq) -> Gaussian:
    """x_d = x_c + dx; s_d = s_c * exp(ds); q_d = normalize(q_c ⊗ (1, dq))."""
    dx, ds, dq = (np.asarray(v, dtype=np.float64).reshape(3) for v in (dx, ds, dq))
    offset = np.concatenate([[1.0], dq])
    return Gaussian(
        g.position + dx,
        quat_normalize(quat_multiply(g.rotation, offset)),
        g.log_scale + ds,
        g.opacity_logit,
        np.array(g.sh, copy=True),
    )


def apply_nonrigid_cloud(cloud: GaussianCloud, dx, ds, dq) -> GaussianCloud:
    offset = np.concatenate([np.ones((len(cloud), 1)), np.asarray(dq).reshape(-1, 3)], axis=1)
    rot = quat_multiply(cloud.rotations, offset)
    rot = quat_normalize(rot) if len(cloud) else rot
    return GaussianCloud(cloud.positions + dx, rot, cloud.log_scales + ds, cloud.opacity_logits.copy(),
                         cloud.sh.copy(), Space.DEFORMED)


def apply_nonrigid_backward(q_c: np.ndarray, dq: np.ndarray, grad_qd: np.ndarray):
    """Gradient of q_d = normalize(q_c ⊗ (1, dq)) w.r.t. q_c and dq."""
    offset = np.concatenate([np.ones((len(q_c), 1)), dq], axis=1)
    raw = quat_multiply(q_c, offset)
    g_raw = normalize_backward(raw, grad_qd)
    g_qc = np.einsum("nab,na->nb", quat_right_matrix(offset), g_raw)
    g_off = np.einsum("nab,na->nb", quat_left_matrix(q_c), g_raw)
    return g_qc, g_off[:, 1:]


# --------------------------------------------------------------------------
# toy rig shipped for tests and demos

TOY_JOINT_NAMES = ["pelvis", "spine", "head", "left_leg", "right_leg"]


def toy_biped() -> Skeleton:
    """Five-joint biped: pelvis root, spine -> head chain, two legs."""
    parents = [-1, 0, 1, 0, 0]
    offsets = [
        (0.0, 1.0, 0.0),
        (0.0, 0.3, 0.0),
        (0.0, 0.35, 0.0),
        (0.12, -0.05, 0.0),
        (-0.12, -0.05, 0.0),
    ]
    rest = np.stack([rigid(translation=o) for o in offsets])
    return Skeleton(parents, rest, np.zeros(10), list(TOY_JOINT_NAMES))


def _box(center, half) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(half, dtype=np.float64)
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    verts = c + corners * h
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, cc, d in quads:
        faces += [(a, b, cc), (a, cc, d)]
    return verts, np.array(faces, dtype=np.int64)


def _subdivide(verts: np.ndarray, faces: np.ndarray, levels: int) -> tuple[np.ndarray, np.ndarray]:
    for _ in range(levels):
        verts = list(map(tuple, verts))
        index = {v: i for i, v in enumerate(verts)}
        new_faces = []

        def mid(i, j):
            m = tuple((np.asarray(verts[i]) + np.asarray(verts[j])) / 2.0)
            if m not in index:
                index[m] = len(verts)
                verts.append(m)
            return index[m]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        verts = np.array(verts)
        faces = np.array(new_faces, dtype=np.int64)
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def toy_biped_mesh(subdivisions: int = 1) -> tuple[Mesh, np.ndarray]:
    """Box-built body for :func:`toy_biped` with distance-based skinning weights.

    Returns the mesh and per-vertex weights (V, 5).
    """
    parts = [
        ((0.0, 1.15, 0.0), (0.16, 0.16, 0.1)),   # torso
        ((0.0, 1.5, 0.0), (0.09, 0.1, 0.09)),    # head
        ((0.12, 0.5, 0.0), (0.06, 0.45, 0.06)),  # left leg
        ((-0.12, 0.5, 0.0), (0.06, 0.45, 0.06)),  # right leg
    ]
    verts, faces = [], []
    base = 0
    for c, h in parts:
        v, f = _subdivide(*_box(c, h), subdivisions)
        verts.append(v)
        faces.append(f + base)
        base += len(v)
    verts = np.concatenate(verts)
    faces = np.concatenate(faces)
    skel = toy_biped()
    joints = skel.joint_positions()
    # bone segments: joint -> first child (leaf joints extend downward / upward)
    ends = {0: joints[1], 1: joints[2], 2: joints[2] + (0, 0.25, 0), 3: joints[3] - (0, 0.9, 0),
            4: joints[4] - (0, 0.9, 0)}
    d = np.stack([_segment_distance(verts, joints[j], ends[j]) for j in range(5)], axis=1)
    w = np.exp(-((d / 0.05) ** 2))
    w[w.sum(axis=1) == 0, 0] = 1.0
    w = w / w.sum(axis=1, keepdims=True)
    w[w < 1e-6] = 0.0
    w = w / w.sum(axis=1, keepdims=True)
    return Mesh(verts, faces), w


def rotation_pose(n_joints: int, joint: int, axis, angle: float, root_translation=(0.0, 0.0, 0.0),
                  time: float = 0.0) -> PoseFrame:
    pose = PoseFrame.rest(n_joints, time)
    pose.joint_rotations[joint] = axis_angle_to_quat(axis, angle)
    pose.root_translation = np.asarray(root_translation, dtype=np.float64)
    return pose
