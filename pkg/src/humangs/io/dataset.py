"""Dataset manifests and metrics files.

A dataset manifest is JSON; paths are relative to the manifest's directory::

    {"views": [{"image": "v0.png", "mask": "m0.png", "camera": "c0.json", "pose_frame": 0}],
     "heldout": [...],                 optional, same shape as views
     "poses": "poses.json",            optional pose sequence indexed by pose_frame
     "rig": "body.rig",                optional: enables the human avatar
     "scene_points": "points.ply",     optional scene initialisation
     "scene_translation": [0, 0, 0]}
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..enhance import PoseSequence
from ..train import View
from .errors import FormatError, ManifestError
from .images import load_image, load_mask
from .ply import PointSet, load_ply
from .poses import camera_from_dict, load_camera, load_pose_sequence
from .rig import Rig, load_rig


@dataclass
class Dataset:
    views: list[View]
    heldout: list[View]
    poses: PoseSequence | None
    rig: Rig | None
    scene_points: PointSet | None
    scene_translation: np.ndarray


def _view(entry, base: Path, poses: PoseSequence | None, idx: int) -> View:
    if not isinstance(entry, dict) or not isinstance(entry.get("image"), str):
        raise ManifestError(f"view {idx} needs an image path")
    unknown = set(entry) - {"image", "mask", "camera", "pose_frame", "name"}
    if unknown:
        raise ManifestError(f"view {idx} has unknown key(s) {sorted(unknown)}")
    cam_ref = entry.get("camera")
    cam = camera_from_dict(cam_ref) if isinstance(cam_ref, dict) else None
    if cam is None:
        if not isinstance(cam_ref, str):
            raise ManifestError(f"view {idx} needs a camera file or object")
        cam = load_camera(base / cam_ref)
    image = load_image(base / entry["image"])
    mask = load_mask(base / entry["mask"]) if isinstance(entry.get("mask"), str) else None
    pose = None
    if entry.get("pose_frame") is not None:
        pf = entry["pose_frame"]
        if poses is None or isinstance(pf, bool) or not isinstance(pf, int) or not 0 <= pf < len(poses):
            raise ManifestError(f"view {idx} pose_frame {pf!r} does not index the pose sequence")
        pose = poses.frames[pf]
    try:
        return View(image, cam, mask, pose, str(entry.get("name", entry["image"])))
    except ValueError as exc:
        raise ManifestError(f"view {idx}: {exc}") from None


def load_dataset(path) -> Dataset:
    path = Path(path)
    base = path.parent
    try:
        doc = json.loads(path.read_bytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"dataset manifest is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ManifestError("dataset manifest must be an object")
    unknown = set(doc) - {"views", "heldout", "poses", "rig", "scene_points", "scene_translation"}
    if unknown:
        raise ManifestError(f"unknown dataset key(s) {sorted(unknown)}")
    rig = load_rig(base / doc["rig"]) if isinstance(doc.get("rig"), str) else None
    n_joints = rig.skeleton.n_joints if rig is not None else None
    poses = load_pose_sequence(base / doc["poses"], n_joints) if isinstance(doc.get("poses"), str) else None
    views_doc = doc.get("views")
    if not isinstance(views_doc, list) or not views_doc:
        raise ManifestError("dataset needs a non-empty views list")
    views = [_view(v, base, poses, i) for i, v in enumerate(views_doc)]
    held_doc = doc.get("heldout", [])
    if not isinstance(held_doc, list):
        raise ManifestError("heldout must be a list")
    heldout = [_view(v, base, poses, i) for i, v in enumerate(held_doc)]
    pts = load_ply(base / doc["scene_points"]) if isinstance(doc.get("scene_points"), str) else None
    t = doc.get("scene_translation", [0.0, 0.0, 0.0])
    if (not isinstance(t, list) or len(t) != 3
            or any(isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) for v in t)):
        raise ManifestError("scene_translation must be three finite numbers")
    return Dataset(views, heldout, poses, rig, pts, np.array(t, dtype=np.float64))


# --------------------------------------------------------------------------
# metrics


def flatten_metrics(doc, prefix: str = "") -> dict[str, object]:
    out: dict[str, object] = {}
    if isinstance(doc, dict):
        for k, v in doc.items():
            out.update(flatten_metrics(v, f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(doc, (list, tuple)):
        for i, v in enumerate(doc):
            out.update(flatten_metrics(v, f"{prefix}.{i}" if prefix else str(i)))
    else:
        out[prefix] = doc
    return out


def _json_safe(doc):
    if isinstance(doc, dict):
        return {str(k): _json_safe(v) for k, v in doc.items()}
    if isinstance(doc, (list, tuple)):
        return [_json_safe(v) for v in doc]
    if isinstance(doc, (float, np.floating)):
        v = float(doc)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(doc, np.integer):
        return int(doc)
    return doc


def format_metrics(doc) -> str:
    """Line-oriented ``key=value``; nested keys are joined with dots."""
    lines = []
    for k, v in flatten_metrics(doc).items():
        lines.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
    return "\n".join(lines) + "\n"


def write_metrics(path, doc) -> tuple[Path, Path]:
    """Writes ``<path>`` as key=value text and ``<path>.json`` as a JSON document."""
    p = Path(path)
    p.write_text(format_metrics(doc))
    j = p.with_name(p.name + ".json")
    j.write_text(json.dumps(_json_safe(doc), indent=1, sort_keys=True))
    return p, j


__all__ = ["Dataset", "FormatError", "load_dataset", "format_metrics", "write_metrics"]
