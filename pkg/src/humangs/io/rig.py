"""Plain-text body rig: template mesh, skeleton and per-vertex skinning weights.

Line formats (``#`` starts a comment)::

    v x y z                         vertex
    f a b c                         triangle, 1-based vertex indices
    joint name parent tx ty tz [qw qx qy qz]   parent is a joint name or '-'
    w vertex joint_name weight      skinning weight, 1-based vertex index
    shape b0 b1 ...                 optional shape coefficients
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..articulation import Skeleton, rigid
from ..gaussians import Mesh, quat_to_matrix
from .errors import RigFormatError


@dataclass
class Rig:
    mesh: Mesh
    skeleton: Skeleton
    weights: np.ndarray  # (V, J)


def _floats(tokens, n, lineno) -> list[float]:
    if len(tokens) != n:
        raise RigFormatError(f"expected {n} numbers, got {len(tokens)}", line=lineno)
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise RigFormatError("malformed number", line=lineno) from None
    if not all(math.isfinite(v) for v in vals):
        raise RigFormatError("non-finite number", line=lineno)
    return vals


def parse_rig(data) -> Rig:
    if isinstance(data, (bytes, bytearray)):
        try:
            data = bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise RigFormatError("rig file is not UTF-8", offset=exc.start) from None
    verts, faces, joints, wlines, shape = [], [], [], [], []
    for lineno, raw in enumerate(data.splitlines(), start=1):
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue
        key, rest = tokens[0], tokens[1:]
        if key == "v":
            verts.append(_floats(rest, 3, lineno))
        elif key == "f":
            if len(rest) != 3:
                raise RigFormatError("face needs 3 indices", line=lineno)
            try:
                faces.append([int(t) - 1 for t in rest])
            except ValueError:
                raise RigFormatError("face index is not an integer", line=lineno) from None
        elif key == "joint":
            if len(rest) not in (5, 9):
                raise RigFormatError("joint needs name, parent, translation and optional quaternion", line=lineno)
            nums = _floats(rest[2:], len(rest) - 2, lineno)
            joints.append((rest[0], rest[1], nums, lineno))
        elif key == "w":
            if len(rest) != 3:
                raise RigFormatError("weight line needs vertex, joint and weight", line=lineno)
            try:
                vi = int(rest[0]) - 1
            except ValueError:
                raise RigFormatError("vertex index is not an integer", line=lineno) from None
            wlines.append((vi, rest[1], _floats(rest[2:], 1, lineno)[0], lineno))
        elif key == "shape":
            shape = _floats(rest, len(rest), lineno)
        else:
            raise RigFormatError(f"unknown record {key!r}", line=lineno)
    if not verts:
        raise RigFormatError("rig has no vertices")
    if not joints:
        raise RigFormatError("rig has no joints")
    nv = len(verts)
    for f in faces:
        if min(f) < 0 or max(f) >= nv:
            raise RigFormatError("face index out of range")
    names = [j[0] for j in joints]
    if len(set(names)) != len(names):
        raise RigFormatError("duplicate joint name")
    index = {n: i for i, n in enumerate(names)}
    parents, locals_ = [], []
    for i, (name, parent, nums, lineno) in enumerate(joints):
        if parent == "-":
            parents.append(-1)
        elif parent in index and index[parent] < i:
            parents.append(index[parent])
        else:
            raise RigFormatError(f"parent {parent!r} of joint {name!r} must be declared earlier", line=lineno)
        rot = np.eye(3)
        if len(nums) == 7:
            q = np.array(nums[3:])
            n = np.linalg.norm(q)
            if n < 1e-12:
                raise RigFormatError("zero-length joint quaternion", line=lineno)
            rot = quat_to_matrix(q / n)
        locals_.append(rigid(rot, nums[:3]))
    w = np.zeros((nv, len(names)))
    for vi, jname, val, lineno in wlines:
        if not 0 <= vi < nv:
            raise RigFormatError("weight vertex index out of range", line=lineno)
        if jname not in index:
            raise RigFormatError(f"unknown joint {jname!r}", line=lineno)
        if val < 0:
            raise RigFormatError("negative skinning weight", line=lineno)
        w[vi, index[jname]] += val
    if np.any(w.sum(axis=1) <= 0):
        raise RigFormatError(f"vertex {int(np.argmin(w.sum(axis=1))) + 1} has no skinning weight")
    try:
        skel = Skeleton(parents, np.array(locals_), np.array(shape, dtype=np.float64), names)
    except ValueError as exc:
        raise RigFormatError(str(exc)) from None
    mesh = Mesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))
    return Rig(mesh, skel, w)


def load_rig(path) -> Rig:
    return parse_rig(Path(path).read_bytes())


def encode_rig(rig: Rig) -> str:
    from ..gaussians import matrix_to_quat

    lines = []
    sk = rig.skeleton
    if len(sk.shape_params):
        lines.append("shape " + " ".join(repr(float(v)) for v in sk.shape_params))
    for v in rig.mesh.vertices:
        lines.append("v " + " ".join(repr(float(c)) for c in v))
    for f in rig.mesh.faces:
        lines.append("f " + " ".join(str(int(i) + 1) for i in f))
    names = sk.joint_names or [f"joint{j}" for j in range(sk.n_joints)]
    for j in range(sk.n_joints):
        m = sk.rest_local_transforms[j]
        parent = "-" if sk.parents[j] < 0 else names[sk.parents[j]]
        q = matrix_to_quat(m[:3, :3])
        lines.append(f"joint {names[j]} {parent} " + " ".join(repr(float(c)) for c in (*m[:3, 3], *q)))
    for vi, ji in zip(*np.nonzero(rig.weights)):
        lines.append(f"w {vi + 1} {names[ji]} {float(rig.weights[vi, ji])!r}")
    return "\n".join(lines) + "\n"


def save_rig(path, rig: Rig) -> None:
    Path(path).write_text(encode_rig(rig))
