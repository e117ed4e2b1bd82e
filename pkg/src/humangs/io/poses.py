"""JSON pose sequences and camera files.

Pose sequence::

    {"fps": 30, "shape": [...], "frames": [{"t": 0.0, "root": [x, y, z],
      "rotations": [[w, x, y, z], ...]}]}

Camera (world-to-camera, right-handed, +z forward, +y down in the image)::

    {"width": 64, "height": 48, "fx": 60, "fy": 60, "cx": 32, "cy": 24,
     "rotation": [r00, r01, r02, r10, ..., r22], "translation": [tx, ty, tz]}

A camera list is ``{"cameras": [{..., "t": 0.0}, ...]}``.
"""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np

from ..articulation import PoseFrame
from ..enhance import CameraTrajectory, PoseSequence
from ..render import Camera
from .errors import CameraFormatError, FormatError, PoseFormatError

log = logging.getLogger(__name__)

NORM_WARN_TOL = 1e-3


def _load_json(data, err: type[FormatError]):
    if isinstance(data, (bytes, bytearray)):
        try:
            data = bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise err("document is not UTF-8", offset=exc.start) from None
    try:
        return json.loads(data)
    except json.JSONDecodeError as exc:
        raise err(f"invalid JSON: {exc.msg}", line=exc.lineno, offset=exc.pos) from None
    except RecursionError:
        raise err("JSON nesting too deep") from None


def _numbers(value, n: int | None, what: str, err: type[FormatError]) -> np.ndarray:
    if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
        raise err(f"{what} must be a list of numbers")
    if n is not None and len(value) != n:
        raise err(f"{what} must have {n} entries, has {len(value)}")
    try:
        a = np.array(value, dtype=np.float64)
    except OverflowError:
        raise err(f"{what} has a value out of range") from None
    if not np.all(np.isfinite(a)):
        raise err(f"{what} contains non-finite values")
    return a


def _number(value, what: str, err: type[FormatError]) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise err(f"{what} must be a number")
    try:
        v = float(value)
    except OverflowError:
        raise err(f"{what} is out of range") from None
    if not math.isfinite(v):
        raise err(f"{what} must be finite")
    return v


# --------------------------------------------------------------------------
# poses


def parse_pose_sequence(data, n_joints: int | None = None) -> PoseSequence:
    doc = _load_json(data, PoseFormatError)
    if not isinstance(doc, dict):
        raise PoseFormatError("pose document must be an object")
    fps = _number(doc.get("fps", 30.0), "fps", PoseFormatError)
    if fps <= 0:
        raise PoseFormatError("fps must be positive")
    shape = _numbers(doc.get("shape", []), None, "shape", PoseFormatError)
    if "joints" in doc:
        declared = doc["joints"]
        if isinstance(declared, bool) or not isinstance(declared, int) or declared < 1:
            raise PoseFormatError("joints must be a positive integer")
        if n_joints is not None and declared != n_joints:
            raise PoseFormatError(f"document declares {declared} joints, expected {n_joints}")
        n_joints = declared
    frames_doc = doc.get("frames")
    if not isinstance(frames_doc, list) or not frames_doc:
        raise PoseFormatError("frames must be a non-empty list")
    frames = []
    for i, fr in enumerate(frames_doc):
        if not isinstance(fr, dict):
            raise PoseFormatError(f"frame {i} must be an object")
        t = _number(fr.get("t", float(i) / fps), f"frame {i} time", PoseFormatError)
        root = _numbers(fr.get("root", [0.0, 0.0, 0.0]), 3, f"frame {i} root", PoseFormatError)
        rots = fr.get("rotations")
        if not isinstance(rots, list) or not rots:
            raise PoseFormatError(f"frame {i} rotations must be a non-empty list")
        expected = n_joints if n_joints is not None else len(rots)
        if len(rots) != expected:
            raise PoseFormatError(f"frame {i} has {len(rots)} rotations, expected {expected}")
        n_joints = expected
        q = np.stack([_numbers(r, 4, f"frame {i} rotation {j}", PoseFormatError) for j, r in enumerate(rots)])
        norms = np.linalg.norm(q, axis=1)
        if np.any(norms < 1e-12):
            raise PoseFormatError(f"frame {i} has a zero-length quaternion")
        if np.any(np.abs(norms - 1.0) > NORM_WARN_TOL):
            log.warning("event=pose_quaternion_normalized frame=%d max_norm_error=%.3g", i,
                        float(np.max(np.abs(norms - 1.0))))
        frames.append(PoseFrame(q / norms[:, None], root, t))
    times = [f.time for f in frames]
    for i in range(1, len(times)):
        if times[i] <= times[i - 1]:
            raise PoseFormatError(f"frame {i} time {times[i]} does not increase")
    return PoseSequence(frames, shape, fps)


def load_pose_sequence(path, n_joints: int | None = None) -> PoseSequence:
    return parse_pose_sequence(Path(path).read_bytes(), n_joints)


def encode_pose_sequence(seq: PoseSequence) -> str:
    doc = {
        "fps": seq.fps,
        "shape": [float(v) for v in seq.shape_params],
        "frames": [{"t": f.time, "root": [float(v) for v in f.root_translation],
                    "rotations": [[float(v) for v in q] for q in f.joint_rotations]} for f in seq.frames],
    }
    return json.dumps(doc, indent=1)


def save_pose_sequence(path, seq: PoseSequence) -> None:
    Path(path).write_text(encode_pose_sequence(seq))


# --------------------------------------------------------------------------
# cameras


def camera_from_dict(d) -> Camera:
    if not isinstance(d, dict):
        raise CameraFormatError("camera must be an object")
    for key in ("width", "height"):
        v = d.get(key)
        if isinstance(v, bool) or not isinstance(v, int) or v < 1 or v > 1 << 16:
            raise CameraFormatError(f"{key} must be a positive integer")
    intr = {k: _number(d.get(k), k, CameraFormatError) for k in ("fx", "fy", "cx", "cy")}
    rot = _numbers(d.get("rotation"), 9, "rotation", CameraFormatError).reshape(3, 3)
    trans = _numbers(d.get("translation"), 3, "translation", CameraFormatError)
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = trans
    try:
        return Camera(d["width"], d["height"], intr["fx"], intr["fy"], intr["cx"], intr["cy"], m)
    except ValueError as exc:
        raise CameraFormatError(str(exc)) from None


def camera_to_dict(cam: Camera) -> dict:
    return {"width": cam.width, "height": cam.height, "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "rotation": [float(v) for v in cam.rotation.reshape(-1)],
            "translation": [float(v) for v in cam.translation]}


def parse_camera(data) -> Camera:
    return camera_from_dict(_load_json(data, CameraFormatError))


def load_camera(path) -> Camera:
    return parse_camera(Path(path).read_bytes())


def save_camera(path, cam: Camera) -> None:
    Path(path).write_text(json.dumps(camera_to_dict(cam), indent=1))


def parse_trajectory(data) -> CameraTrajectory:
    doc = _load_json(data, CameraFormatError)
    if isinstance(doc, dict) and "cameras" not in doc:
        return CameraTrajectory([(0.0, camera_from_dict(doc))])
    items = doc.get("cameras") if isinstance(doc, dict) else doc
    if not isinstance(items, list) or not items:
        raise CameraFormatError("cameras must be a non-empty list")
    entries = []
    for i, item in enumerate(items):
        cam = camera_from_dict(item)
        entries.append((_number(item.get("t", float(i)), f"camera {i} time", CameraFormatError), cam))
    try:
        return CameraTrajectory(entries)
    except ValueError as exc:
        raise CameraFormatError(str(exc)) from None


def load_trajectory(path) -> CameraTrajectory:
    return parse_trajectory(Path(path).read_bytes())


def save_trajectory(path, traj: CameraTrajectory) -> None:
    doc = {"cameras": [dict(camera_to_dict(c), t=t) for t, c in traj.entries]}
    Path(path).write_text(json.dumps(doc, indent=1))
