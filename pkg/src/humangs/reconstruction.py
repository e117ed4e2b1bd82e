"""Animatable human avatar plus static scene, composed into one renderable world cloud.

The human lives in canonical space. Posing runs triplane features through the
decoders, applies the non-rigid offsets, then skins with the effective weights.
The composed cloud is ``concat(scene, posed human + T_s)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .articulation import (
    LbsTape,
    LbsWeightMatrix,
    PoseFrame,
    Skeleton,
    apply_nonrigid_backward,
    apply_nonrigid_cloud,
    compute_bone_transforms,
    effective_weights,
    lbs_cloud,
    lbs_cloud_backward,
    softmax_backward,
)
from .gaussians import GaussianCloud, Mesh, Space, sample_mesh_surface
from .nets import (
    Decoders,
    MlpCache,
    MlpDecoder,
    TriplaneEncoder,
    TriplaneTape,
    mlp_backward,
    mlp_forward,
    triplane_backward,
    triplane_position_grad,
    triplane_query,
)
from .render import CloudGradients


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class HumanAvatar:
    canonical: GaussianCloud
    skeleton: Skeleton
    weights: LbsWeightMatrix
    decoders: Decoders

    def __post_init__(self):
        if len(self.weights) != len(self.canonical):
            raise ValueError(f"{len(self.weights)} weight rows for {len(self.canonical)} Gaussians")
        if self.weights.n_joints != self.skeleton.n_joints:
            raise ValueError(f"weights cover {self.weights.n_joints} joints, skeleton has {self.skeleton.n_joints}")
        if self.decoders.lbs_offset.out_dim != self.skeleton.n_joints:
            raise ValueError("skinning-offset decoder width does not match the joint count")
        if self.decoders.sh_degree != self.canonical.sh_degree:
            raise ValueError("colour decoder SH degree does not match the cloud")

    def copy(self) -> "HumanAvatar":
        return HumanAvatar(self.canonical.copy(), self.skeleton,
                           LbsWeightMatrix(self.weights.base_weights.copy(), self.weights.learned_logit_offsets.copy()),
                           self.decoders.copy())


@dataclass
class PoseTape:
    canonical: GaussianCloud
    features: np.ndarray
    triplane: TriplaneTape
    nonrigid: MlpCache
    lbs_offset: MlpCache
    color: MlpCache
    dq: np.ndarray
    weights: np.ndarray
    bones: np.ndarray
    lbs: LbsTape


def pose_avatar(avatar: HumanAvatar, pose: PoseFrame | None = None, with_tape: bool = False):
    """Posed copy of the avatar; the canonical cloud is never modified."""
    can = avatar.canonical
    dec = avatar.decoders
    if pose is None:
        pose = PoseFrame.rest(avatar.skeleton.n_joints)
    bones = compute_bone_transforms(avatar.skeleton, pose)
    if len(can) == 0:
        posed = can.with_space(Space.POSED)
        return (posed, None) if with_tape else posed
    f, ttape = triplane_query(dec.triplane, can.positions, return_tape=True)
    y_nr, c_nr = mlp_forward(dec.nonrigid, f, cache=True)
    y_w, c_w = mlp_forward(dec.lbs_offset, f, cache=True)
    y_c, c_c = mlp_forward(dec.color, f, cache=True)
    dx, ds, dq = y_nr[:, 0:3], y_nr[:, 3:6], y_nr[:, 6:9]
    deformed = apply_nonrigid_cloud(can, dx, ds, dq)
    # colour decoder outputs are residuals on the stored per-Gaussian values
    deformed.opacity_logits = can.opacity_logits + y_c[:, 0]
    deformed.sh = can.sh + y_c[:, 1:].reshape(can.sh.shape)
    w = effective_weights(avatar.weights.base_weights, avatar.weights.learned_logit_offsets + y_w)
    posed, ltape = lbs_cloud(deformed, w, bones)
    if not with_tape:
        return posed
    return posed, PoseTape(can, f, ttape, c_nr, c_w, c_c, dq, w, bones, ltape)


@dataclass
class AvatarGradients:
    cloud: CloudGradients  # w.r.t. canonical attributes
    lbs_offsets: np.ndarray
    triplane: np.ndarray
    mlps: dict[str, list[np.ndarray]]


def pose_avatar_backward(avatar: HumanAvatar, tape: PoseTape, g: CloudGradients) -> AvatarGradients:
    """Chain posed-cloud gradients back to canonical attributes and decoder parameters.

    The polar rotation of the blended bone transform is treated as a constant
    with respect to the skinning weights.
    """
    dec = avatar.decoders
    g_xd, g_qd, g_w = lbs_cloud_backward(tape.lbs, tape.bones, g.positions, g.rotations)
    g_logits = softmax_backward(tape.weights, g_w)
    g_qc, g_dq = apply_nonrigid_backward(tape.canonical.rotations, tape.dq, g_qd)
    g_nr = np.concatenate([g_xd, g.log_scales, g_dq], axis=1)
    p_nr, f_nr = mlp_backward(dec.nonrigid, tape.nonrigid, g_nr)
    p_w, f_w = mlp_backward(dec.lbs_offset, tape.lbs_offset, g_logits)
    g_col = np.concatenate([g.opacity_logits[:, None], g.sh.reshape(len(g.sh), -1)], axis=1)
    p_c, f_c = mlp_backward(dec.color, tape.color, g_col)
    g_f = f_nr + f_w + f_c
    g_planes = triplane_backward(dec.triplane, tape.triplane, g_f)
    g_xc = g_xd + triplane_position_grad(dec.triplane, tape.triplane, g_f)
    cloud_g = CloudGradients(g_xc, g_qc, g.log_scales.copy(), g.opacity_logits.copy(), g.sh.copy(), g.means2d)
    return AvatarGradients(cloud_g, g_logits, g_planes, {"nonrigid": p_nr, "lbs_offset": p_w, "color": p_c})


@dataclass
class Reconstruction:
    """Scene Gaussians in world space plus an optional animatable human."""

    scene: GaussianCloud
    human: HumanAvatar | None = None
    scene_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.scene_translation = np.asarray(self.scene_translation, dtype=np.float64).reshape(3)
        if self.human is not None and len(self.scene) and self.human.canonical.sh_degree != self.scene.sh_degree:
            raise ValueError("scene and human SH degrees differ")

    def copy(self) -> "Reconstruction":
        return Reconstruction(self.scene.copy(), None if self.human is None else self.human.copy(),
                              self.scene_translation.copy())

    def quantized(self) -> "Reconstruction":
        """Copy with every stored array rounded through float32 (checkpoint precision)."""
        q = _f32
        human = None
        if self.human is not None:
            h = self.human
            sk = h.skeleton
            d = h.decoders
            human = HumanAvatar(
                h.canonical.quantized(),
                Skeleton(sk.parents, q(sk.rest_local_transforms), q(sk.shape_params), sk.joint_names),
                LbsWeightMatrix(q(h.weights.base_weights), q(h.weights.learned_logit_offsets)),
                Decoders(TriplaneEncoder(q(d.triplane.planes), q(d.triplane.bbox_min), q(d.triplane.bbox_max)),
                         *(MlpDecoder([q(w) for w in m.weights], [q(b) for b in m.biases])
                           for m in (d.nonrigid, d.lbs_offset, d.color))),
            )
        return Reconstruction(self.scene.quantized(), human, q(self.scene_translation))

    @property
    def num_gaussians(self) -> int:
        return len(self.scene) + (0 if self.human is None else len(self.human.canonical))

    def compose(self, pose: PoseFrame | None = None, with_tape: bool = False):
        """World cloud: scene first, then the posed human translated by T_s."""
        if self.human is None:
            world = self.scene.copy()
            return (world, None) if with_tape else world
        posed, tape = pose_avatar(self.human, pose, with_tape=True)
        posed.positions = posed.positions + self.scene_translation
        if len(self.scene) == 0:
            world = posed.with_space(Space.WORLD)
        else:
            world = GaussianCloud.concat([self.scene, posed], space=Space.WORLD)
        return (world, tape) if with_tape else world

    # -- optimisation plumbing -------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Named views of every trainable array (updated in place by the optimiser)."""
        out = {f"scene.{a}": getattr(self.scene, a) for a in GaussianCloud.ATTRIBUTES}
        if self.human is not None:
            h = self.human
            out.update({f"human.{a}": getattr(h.canonical, a) for a in GaussianCloud.ATTRIBUTES})
            out["human.lbs_offsets"] = h.weights.learned_logit_offsets
            out["decoder.triplane"] = h.decoders.triplane.planes
            for name, mlp in h.decoders.mlps().items():
                for i, p in enumerate(mlp.parameters()):
                    out[f"decoder.{name}.{i}"] = p
        return out

    def backward(self, tape: PoseTape | None, g: CloudGradients) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Map world-cloud gradients onto :meth:`parameters` names.

        Returns (grads, screen-space mean gradient per stored Gaussian).
        """
        ns = len(self.scene)
        grads = {f"scene.{a}": getattr(g, a)[:ns] for a in GaussianCloud.ATTRIBUTES}
        means2d = g.means2d
        if self.human is not None:
            hg = CloudGradients(*(getattr(g, a)[ns:] for a in GaussianCloud.ATTRIBUTES), g.means2d[ns:])
            if tape is None:
                ag = AvatarGradients(hg, np.zeros((0, self.human.skeleton.n_joints)),
                                     np.zeros_like(self.human.decoders.triplane.planes),
                                     {k: [np.zeros_like(p) for p in m.parameters()]
                                      for k, m in self.human.decoders.mlps().items()})
            else:
                ag = pose_avatar_backward(self.human, tape, hg)
            grads.update({f"human.{a}": getattr(ag.cloud, a) for a in GaussianCloud.ATTRIBUTES})
            grads["human.lbs_offsets"] = ag.lbs_offsets
            grads["decoder.triplane"] = ag.triplane
            for name, ps in ag.mlps.items():
                for i, p in enumerate(ps):
                    grads[f"decoder.{name}.{i}"] = p
        return grads, means2d

    def gaussian_groups(self) -> dict[str, str]:
        """Parameter name -> owning cloud ('scene'/'human') for per-Gaussian arrays."""
        out = {f"scene.{a}": "scene" for a in GaussianCloud.ATTRIBUTES}
        if self.human is not None:
            out.update({f"human.{a}": "human" for a in GaussianCloud.ATTRIBUTES})
            out["human.lbs_offsets"] = "human"
        return out


def build_avatar(mesh: Mesh, vertex_weights: np.ndarray, skeleton: Skeleton, n_points: int, seed: int = 0,
                 sh_degree: int = 0, feature_dim: int = 64, plane_resolution: int = 64, hidden: int = 128,
                 color=(0.5, 0.5, 0.5), margin: float = 0.1) -> HumanAvatar:
    """Canonical avatar sampled from a template mesh.

    Skinning weights of each sample are the barycentric blend of its triangle's
    vertex weights; the triplane box is the sample bounds padded by ``margin``.
    """
    samples = sample_mesh_surface(mesh, n_points, seed)
    w = samples.interpolate(np.asarray(vertex_weights, dtype=np.float64))
    w = w / w.sum(axis=1, keepdims=True)
    cloud = GaussianCloud.from_points(samples.points, np.broadcast_to(np.asarray(color, float), (n_points, 3)),
                                      sh_degree=sh_degree, space=Space.CANONICAL)
    lo = samples.points.min(axis=0) - margin
    hi = samples.points.max(axis=0) + margin
    dec = Decoders.create(lo, hi, skeleton.n_joints, sh_degree, feature_dim, plane_resolution, hidden, seed)
    return HumanAvatar(cloud, skeleton, LbsWeightMatrix(w, np.zeros_like(w)), dec)
