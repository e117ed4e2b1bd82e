"""Synthetic demo dataset: the toy biped on a checker floor, rendered from an orbit."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .articulation import rotation_pose, toy_biped, toy_biped_mesh
from .enhance import CameraTrajectory, PoseSequence
from .gaussians import GaussianCloud, rgb_to_sh_dc
from .io.images import save_png
from .io.ply import save_ply
from .io.poses import save_camera, save_pose_sequence, save_trajectory
from .io.rig import Rig, save_rig
from .reconstruction import Reconstruction, build_avatar
from .render import render
from .synthetic import orbit_cameras

DEMO_CONFIG = {
    "train": {"iterations": 300, "densify_from": 100, "log_interval": 50},
    "human": {"n_points": 400, "feature_dim": 16, "plane_resolution": 16, "hidden": 32},
}


def checker_floor(cells: int = 16, half_extent: float = 1.4) -> GaussianCloud:
    """Flat splats on the y=0 plane in a two-tone checker pattern."""
    u = (np.arange(cells) + 0.5) / cells * 2 * half_extent - half_extent
    x, z = np.meshgrid(u, u, indexing="ij")
    pts = np.stack([x.ravel(), np.zeros(x.size), z.ravel()], axis=1)
    ij = np.add.outer(np.arange(cells), np.arange(cells)).ravel() % 2
    col = np.where(ij[:, None] == 1, [0.2, 0.45, 0.3], [0.75, 0.75, 0.65])
    cloud = GaussianCloud.from_points(pts, col, log_scale=np.log(half_extent / cells), opacity=0.9)
    cloud.log_scales[:, 1] = np.log(0.01)
    return cloud


def demo_reconstruction(seed: int = 0) -> tuple[Reconstruction, Rig, PoseSequence]:
    """Ground truth for the demo: a coloured biped standing on a checker floor."""
    skel = toy_biped()
    mesh, w = toy_biped_mesh(1)
    human = build_avatar(mesh, w, skel, 400, seed, feature_dim=16, plane_resolution=16, hidden=32)
    y = human.canonical.positions[:, 1]
    rgb = np.stack([0.6 + 0.2 * np.sin(6 * y), np.full_like(y, 0.35), 0.3 + 0.3 * (y > 1.0)], axis=1)
    human.canonical.sh[:, 0, :] = rgb_to_sh_dc(rgb)
    scene = checker_floor(16, 1.4)
    frames = [rotation_pose(skel.n_joints, 3, (1, 0, 0), 0.4 * np.sin(k), time=k / 10) for k in range(4)]
    seq = PoseSequence(frames, skel.shape_params, 10.0)
    return Reconstruction(scene, human), Rig(mesh, skel, w), seq


def write_demo_dataset(out, seed: int = 0, size: int = 48) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    gt, rig, seq = demo_reconstruction(seed)
    save_rig(out / "body.rig", rig)
    save_pose_sequence(out / "poses.json", seq)
    rng = np.random.default_rng(seed)
    pts = gt.scene.positions + rng.normal(0.0, 0.03, gt.scene.positions.shape)
    save_ply(out / "points.ply", pts, np.full((len(pts), 3), 0.5))
    focal = 1.1 * size
    cams = orbit_cameras(8, size=size, focal=focal, radius=3.5, target=(0.0, 0.9, 0.0), wobble=0.2)
    held = orbit_cameras(2, offset=0.4, size=size, focal=focal, radius=3.5, target=(0.0, 0.9, 0.0), wobble=0.2)
    doc = {"views": [], "heldout": [], "poses": "poses.json", "rig": "body.rig", "scene_points": "points.ply"}
    for key, group in (("views", cams), ("heldout", held)):
        for i, cam in enumerate(group):
            frame = i % len(seq)
            res = render(gt.compose(seq.frames[frame]), cam, keep_cache=False)
            stem = f"{key}_{i:02d}"
            save_png(out / f"{stem}.png", res.color)
            save_png(out / f"{stem}_mask.png", np.repeat(res.alpha[..., None], 3, axis=2))
            save_camera(out / f"{stem}_camera.json", cam)
            doc[key].append({"image": f"{stem}.png", "mask": f"{stem}_mask.png", "camera": f"{stem}_camera.json",
                             "pose_frame": frame})
    save_camera(out / "camera.json", held[0])
    save_trajectory(out / "trajectory.json", CameraTrajectory([(f.time, cams[k % len(cams)])
                                                               for k, f in enumerate(seq.frames)]))
    (out / "config.json").write_text(json.dumps(DEMO_CONFIG, indent=1, sort_keys=True))
    (out / "critic.txt").write_text("# <role> <round|*> <view|*> <json>\n"
                                    'localize 1 0 {"regions": [{"box": [8, 8, 24, 24], "label": "blurry", '
                                    '"note": "demo"}]}\n')
    manifest = out / "dataset.json"
    manifest.write_text(json.dumps(doc, indent=1))
    return manifest
