"""Animation, scene fusion, novel-view synthesis and the iterative enhancement loop."""
from __future__ import annotations

import logging
import math
import subprocess
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .articulation import PoseFrame
from .gaussians import GaussianCloud, Space
from .reconstruction import HumanAvatar, Reconstruction, pose_avatar
from .render import Camera, look_at, render
from .train import TrainConfig, Trainer, TrainReport, View

log = logging.getLogger(__name__)


@dataclass
class PoseSequence:
    frames: list[PoseFrame]
    shape_params: np.ndarray = field(default_factory=lambda: np.zeros(10))
    fps: float = 30.0

    def __post_init__(self):
        self.shape_params = np.asarray(self.shape_params, dtype=np.float64).reshape(-1)
        if not self.frames:
            raise ValueError("pose sequence needs at least one frame")
        times = [f.time for f in self.frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("pose timestamps must be strictly increasing")
        counts = {f.joint_rotations.shape[0] for f in self.frames}
        if len(counts) != 1:
            raise ValueError("all frames must pose the same number of joints")
        if not (self.fps > 0):
            raise ValueError("fps must be positive")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class CameraTrajectory:
    entries: list[tuple[float, Camera]]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("trajectory needs at least one camera")
        times = [t for t, _ in self.entries]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("trajectory times must be non-decreasing")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def cameras(self) -> list[Camera]:
        return [c for _, c in self.entries]


@dataclass
class Intrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float = 50.0) -> "Intrinsics":
        f = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2)
        return cls(width, height, f, f, width / 2.0, height / 2.0)


def make_orbit_trajectory(center, radius: float, height: float, count: int, intrinsics: Intrinsics,
                          up=(0.0, 1.0, 0.0)) -> CameraTrajectory:
    """``count`` cameras evenly spaced in azimuth on a circle of ``radius`` raised by
    ``height`` along +y, all looking at ``center``. The first sits on the +x side."""
    if not (radius > 0):
        raise ValueError("orbit radius must be positive")
    if count < 1:
        raise ValueError("orbit needs at least one camera")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    entries = []
    for i in range(count):
        a = 2.0 * math.pi * i / count
        eye = center + np.array([radius * math.cos(a), height, radius * math.sin(a)])
        m = look_at(eye, center, up)
        entries.append((float(i), Camera(intrinsics.width, intrinsics.height, intrinsics.fx, intrinsics.fy,
                                         intrinsics.cx, intrinsics.cy, m)))
    return CameraTrajectory(entries)


def default_trajectory(cloud: GaussianCloud, intrinsics: Intrinsics, count: int = 16,
                       factor: float = 1.2) -> CameraTrajectory:
    """Orbit at ``factor`` times the cloud's bounding-sphere radius."""
    if len(cloud) == 0:
        return make_orbit_trajectory(np.zeros(3), 1.0, 0.0, count, intrinsics)
    center = cloud.positions.mean(axis=0)
    r = float(np.max(np.linalg.norm(cloud.positions - center, axis=1)))
    return make_orbit_trajectory(center, factor * max(r, 1e-3), 0.0, count, intrinsics)


# --------------------------------------------------------------------------
# animation and fusion


def apply_pose_sequence(avatar: HumanAvatar, seq: PoseSequence) -> list[GaussianCloud]:
    """One posed cloud per frame; the avatar is not modified."""
    n = avatar.skeleton.n_joints
    if seq.frames[0].joint_rotations.shape[0] != n:
        raise ValueError(f"pose sequence drives {seq.frames[0].joint_rotations.shape[0]} joints, skeleton has {n}")
    return [pose_avatar(avatar, frame) for frame in seq.frames]


def fuse_scene(human: GaussianCloud, scene: GaussianCloud, scene_translation) -> GaussianCloud:
    """Scene Gaussians followed by the human translated by T_s."""
    t = np.asarray(scene_translation, dtype=np.float64).reshape(3)
    moved = human.copy()
    moved.positions = moved.positions + t
    if len(scene) == 0:
        return moved.with_space(Space.WORLD)
    if len(human) == 0:
        return scene.with_space(Space.WORLD)
    return GaussianCloud.concat([scene, moved], space=Space.WORLD)


def generate_synthetic_views(source, traj: CameraTrajectory, background=(0.0, 0.0, 0.0)) -> list[np.ndarray]:
    """Render ``source`` from every trajectory camera.

    ``source`` is a cloud, a Reconstruction (rest pose) or a list of per-frame
    clouds, in which case frame i is rendered from camera i.
    """
    cams = traj.cameras
    if isinstance(source, Reconstruction):
        source = source.compose()
    if isinstance(source, GaussianCloud):
        return [render(source, c, background, keep_cache=False).color for c in cams]
    frames = list(source)
    if len(frames) != len(cams):
        raise ValueError(f"{len(frames)} posed frames for {len(cams)} trajectory cameras")
    return [render(f, c, background, keep_cache=False).color for f, c in zip(frames, cams)]


# --------------------------------------------------------------------------
# enhancers


class EnhancerError(RuntimeError):
    pass


class SequenceEnhancer(Protocol):
    def __call__(self, frames: list[np.ndarray]) -> list[np.ndarray]: ...


class IdentityEnhancer:
    def __call__(self, frames):
        return [np.array(f, copy=True) for f in frames]


class SharpenEnhancer:
    """Unsharp mask: f + amount * (f - blur(f)), clipped to [0, 1]."""

    def __init__(self, amount: float = 1.0, sigma: float = 1.0):
        self.amount = amount
        self.sigma = sigma

    def __call__(self, frames):
        out = []
        for f in frames:
            f = np.asarray(f, dtype=np.float64)
            blur = gaussian_filter(f, sigma=(self.sigma, self.sigma, 0), mode="nearest")
            out.append(np.clip(f + self.amount * (f - blur), 0.0, 1.0))
        return out


class ExternalEnhancer:
    """Runs ``command <input-dir> <output-dir> <manifest>``.

    Frames are exchanged as frame_%05d.png plus manifest.txt; the command must
    exit 0 and write a frame of the same name and size for every input.
    """

    def __init__(self, command: Sequence[str], timeout: float = 3600.0, fps: float = 30.0):
        if not command:
            raise ValueError("external enhancer needs a command")
        self.command = list(command)
        self.timeout = timeout
        self.fps = fps

    def __call__(self, frames):
        from .io.images import load_image, save_png
        from .io.sequence import read_manifest, write_manifest

        with tempfile.TemporaryDirectory(prefix="enhance-") as tmp:
            src, dst = Path(tmp) / "in", Path(tmp) / "out"
            src.mkdir()
            dst.mkdir()
            names = []
            for i, f in enumerate(frames):
                name = f"frame_{i:05d}.png"
                save_png(src / name, f)
                names.append(name)
            manifest = src / "manifest.txt"
            write_manifest(manifest, names, self.fps)
            try:
                proc = subprocess.run(self.command + [str(src), str(dst), str(manifest)], capture_output=True,
                                      timeout=self.timeout, check=False)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise EnhancerError(f"enhancer failed to run: {exc}") from exc
            if proc.returncode != 0:
                raise EnhancerError(f"enhancer exited {proc.returncode}: {proc.stderr.decode(errors='replace')[-500:]}")
            out_manifest = dst / "manifest.txt"
            out_names = read_manifest(out_manifest)[0] if out_manifest.exists() else names
            if len(out_names) != len(names):
                raise EnhancerError(f"enhancer produced {len(out_names)} frames for {len(names)} inputs")
            try:
                return [load_image(dst / n) for n in out_names]
            except (OSError, ValueError) as exc:
                raise EnhancerError(f"unreadable enhancer output: {exc}") from exc


# --------------------------------------------------------------------------
# iterative enhancement


class EnhancementAborted(RuntimeError):
    def __init__(self, message: str, last_good: Reconstruction, outer_completed: int):
        super().__init__(message)
        self.last_good = last_good
        self.outer_completed = outer_completed


@dataclass
class EnhanceResult:
    recon: Reconstruction
    enhancer_calls: int = 0
    inner_steps: int = 0
    reports: list[TrainReport] = field(default_factory=list)


def iterative_enhance(recon: Reconstruction, enhancer: SequenceEnhancer, traj: CameraTrajectory,
                      cfg: TrainConfig, poses: Sequence[PoseFrame] | None = None) -> EnhanceResult:
    """E rounds of: render the trajectory, enhance the frames, then T optimisation
    steps against the enhanced frames (no masks, so the mask term is inactive).

    ``cfg.enhance_scope`` chooses joint scene+human optimisation or human only.
    """
    cfg.validate()
    cams = traj.cameras
    if poses is not None and len(poses) != len(cams):
        raise ValueError(f"{len(poses)} poses for {len(cams)} trajectory cameras")
    frame_poses = list(poses) if poses is not None else [None] * len(cams)
    trainable = None if cfg.enhance_scope == "joint" else {"human", "decoder"}
    if trainable is not None and recon.human is None:
        raise ValueError("human-only enhancement needs a human avatar")
    inner_cfg = replace(cfg, iterations=cfg.enhance_inner_T)
    current = recon.copy()
    result = EnhanceResult(current)
    for e in range(cfg.enhance_outer_E):
        rendered = [render(current.compose(p), c, cfg.background, keep_cache=False).color
                    for p, c in zip(frame_poses, cams)]
        enhanced = enhancer(rendered)
        result.enhancer_calls += 1
        if len(enhanced) != len(rendered) or any(np.shape(a) != b.shape for a, b in zip(enhanced, rendered)):
            raise EnhancementAborted(f"enhancer output shape mismatch in outer iteration {e + 1}", current, e)
        views = [View(np.asarray(img, dtype=np.float64), c, None, p, f"enhanced_{e}_{i}")
                 for i, (img, c, p) in enumerate(zip(enhanced, cams, frame_poses))]
        trainer = Trainer(current, views, replace(inner_cfg, seed=cfg.seed + e), trainable=trainable)
        report = trainer.run(cfg.enhance_inner_T)
        result.inner_steps += report.steps_run
        result.reports.append(report)
        current = trainer.recon
        log.info("event=enhance_outer e=%d loss=%s gaussians=%d", e + 1,
                 report.losses[-1]["total"] if report.losses else "nan", current.num_gaussians)
    result.recon = current
    return result
