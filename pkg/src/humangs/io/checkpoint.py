"""Binary checkpoint container.

Layout: magic ``HGSC``, u32 format version, u32 section count, then per section
u16 name length, UTF-8 name, u64 payload length, payload. Every integer and
float is little-endian; all float arrays are stored as 32-bit. Readers skip
sections they do not know, with a warning.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..articulation import LbsWeightMatrix, Skeleton
from ..gaussians import GaussianCloud, Space, sh_degree_from_count
from ..nets import Decoders, MlpDecoder, TriplaneEncoder
from ..reconstruction import HumanAvatar, Reconstruction
from ..train import AdamState
from .errors import CheckpointError, UnsupportedVersionError

log = logging.getLogger(__name__)

MAGIC = b"HGSC"
FORMAT_VERSION = 1
MAX_DIM = 1 << 31


@dataclass
class Checkpoint:
    recon: Reconstruction
    train_state: AdamState | None = None
    iteration: int = 0
    provenance: dict = field(default_factory=dict)
    skipped_sections: list[str] = field(default_factory=list)


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u16(self, v):
        self.parts.append(struct.pack("<H", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def i32s(self, arr):
        self.parts.append(np.asarray(arr, dtype="<i4").tobytes())

    def u64(self, v):
        self.parts.append(struct.pack("<Q", v))

    def f32s(self, arr):
        self.parts.append(np.ascontiguousarray(np.asarray(arr, dtype="<f4")).tobytes())

    def text(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.parts.append(b)

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, section: str = ""):
        self.data = data
        self.pos = 0
        self.section = section

    def _take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointError(f"section {self.section!r} truncated", offset=self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def i32s(self, n: int) -> np.ndarray:
        return np.frombuffer(self._take(4 * n), dtype="<i4").astype(np.int64)

    def f32s(self, shape) -> np.ndarray:
        shape = tuple(int(s) for s in np.atleast_1d(shape))
        n = math.prod(shape)
        if n > MAX_DIM:
            raise CheckpointError(f"section {self.section!r} declares an absurd array size", offset=self.pos)
        return np.frombuffer(self._take(4 * n), dtype="<f4").astype(np.float64).reshape(shape)

    def text(self) -> str:
        n = self.u32()
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"section {self.section!r} holds invalid UTF-8", offset=self.pos) from None

    def done(self) -> None:
        if self.pos != len(self.data):
            raise CheckpointError(f"section {self.section!r} has {len(self.data) - self.pos} trailing bytes")


# --------------------------------------------------------------------------
# section codecs


def _write_cloud(cloud: GaussianCloud) -> bytes:
    w = _Writer()
    w.u32(len(cloud))
    w.u32(cloud.sh.shape[1])
    w.text(cloud.space.value)
    for a in GaussianCloud.ATTRIBUTES:
        w.f32s(getattr(cloud, a))
    return w.bytes()


def _read_cloud(r: _Reader) -> GaussianCloud:
    n, k = r.u32(), r.u32()
    try:
        sh_degree_from_count(k)
        space = Space(r.text())
    except ValueError as exc:
        raise CheckpointError(f"bad cloud header: {exc}") from None
    cloud = GaussianCloud(r.f32s((n, 3)), r.f32s((n, 4)), r.f32s((n, 3)), r.f32s(n), r.f32s((n, k, 3)), space)
    r.done()
    return cloud


def _write_skeleton(sk: Skeleton) -> bytes:
    w = _Writer()
    w.u32(sk.n_joints)
    w.i32s(sk.parents)
    w.f32s(sk.rest_local_transforms)
    w.u32(len(sk.shape_params))
    w.f32s(sk.shape_params)
    names = sk.joint_names or []
    w.u32(len(names))
    for name in names:
        w.text(name)
    return w.bytes()


def _read_skeleton(r: _Reader) -> Skeleton:
    j = r.u32()
    if j > 1 << 16:
        raise CheckpointError("implausible joint count")
    parents = r.i32s(j)
    rest = r.f32s((j, 4, 4))
    shape = r.f32s(r.u32())
    names = [r.text() for _ in range(r.u32())] or None
    r.done()
    try:
        return Skeleton(parents, rest, shape, names)
    except ValueError as exc:
        raise CheckpointError(f"bad skeleton: {exc}") from None


def _write_lbs(w_: LbsWeightMatrix) -> bytes:
    w = _Writer()
    n, j = w_.base_weights.shape
    w.u32(n)
    w.u32(j)
    w.f32s(w_.base_weights)
    w.f32s(w_.learned_logit_offsets)
    return w.bytes()


def _read_lbs(r: _Reader) -> LbsWeightMatrix:
    n, j = r.u32(), r.u32()
    base, off = r.f32s((n, j)), r.f32s((n, j))
    r.done()
    try:
        return LbsWeightMatrix(base, off)
    except ValueError as exc:
        raise CheckpointError(f"bad skinning weights: {exc}") from None


def _write_triplane(t: TriplaneEncoder) -> bytes:
    w = _Writer()
    for s in t.planes.shape[1:]:
        w.u32(s)
    w.f32s(t.bbox_min)
    w.f32s(t.bbox_max)
    w.f32s(t.planes)
    return w.bytes()


def _read_triplane(r: _Reader) -> TriplaneEncoder:
    h, wd, d = r.u32(), r.u32(), r.u32()
    lo, hi = r.f32s(3), r.f32s(3)
    planes = r.f32s((3, h, wd, d))
    r.done()
    try:
        return TriplaneEncoder(planes, lo, hi)
    except ValueError as exc:
        raise CheckpointError(f"bad triplane: {exc}") from None


def _write_mlp(m: MlpDecoder) -> bytes:
    w = _Writer()
    w.u32(len(m.weights))
    for W, b in zip(m.weights, m.biases):
        w.u32(W.shape[0])
        w.u32(W.shape[1])
        w.f32s(W)
        w.f32s(b)
    return w.bytes()


def _read_mlp(r: _Reader) -> MlpDecoder:
    n = r.u32()
    if n == 0 or n > 64:
        raise CheckpointError("implausible decoder depth")
    ws, bs = [], []
    for _ in range(n):
        i, o = r.u32(), r.u32()
        ws.append(r.f32s((i, o)))
        bs.append(r.f32s(o))
    r.done()
    try:
        return MlpDecoder(ws, bs)
    except ValueError as exc:
        raise CheckpointError(f"bad decoder: {exc}") from None


def _write_train_state(state: AdamState, iteration: int) -> bytes:
    w = _Writer()
    w.u64(iteration)
    w.u64(state.step)
    w.u64(state.skipped)
    names = sorted(state.m)
    w.u32(len(names))
    for k in names:
        w.text(k)
        shape = state.m[k].shape
        w.u32(len(shape))
        for s in shape:
            w.u32(s)
        w.f32s(state.m[k])
        w.f32s(state.v[k])
    return w.bytes()


def _read_train_state(r: _Reader) -> tuple[AdamState, int]:
    iteration, step, skipped = r.u64(), r.u64(), r.u64()
    state = AdamState(step=step, skipped=skipped)
    for _ in range(r.u32()):
        k = r.text()
        nd = r.u32()
        if nd > 8:
            raise CheckpointError("implausible moment rank")
        shape = tuple(r.u32() for _ in range(nd))
        state.m[k] = r.f32s(shape) if shape else r.f32s(()).reshape(())
        state.v[k] = r.f32s(shape) if shape else r.f32s(()).reshape(())
    r.done()
    return state, iteration


# --------------------------------------------------------------------------
# container


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    rec = ckpt.recon
    sections: list[tuple[str, bytes]] = [("scene", _write_cloud(rec.scene))]
    w = _Writer()
    w.f32s(rec.scene_translation)
    sections.append(("scene_translation", w.bytes()))
    if rec.human is not None:
        h = rec.human
        sections += [
            ("human", _write_cloud(h.canonical)),
            ("skeleton", _write_skeleton(h.skeleton)),
            ("lbs", _write_lbs(h.weights)),
            ("triplane", _write_triplane(h.decoders.triplane)),
        ]
        for name, mlp in h.decoders.mlps().items():
            sections.append((f"decoder.{name}", _write_mlp(mlp)))
    if ckpt.train_state is not None:
        sections.append(("train_state", _write_train_state(ckpt.train_state, ckpt.iteration)))
    elif ckpt.iteration:
        w = _Writer()
        w.u64(ckpt.iteration)
        sections.append(("iteration", w.bytes()))
    sections.append(("provenance", json.dumps(ckpt.provenance, sort_keys=True).encode("utf-8")))
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(sections))]
    for name, payload in sections:
        nb = name.encode("utf-8")
        out += [struct.pack("<H", len(nb)), nb, struct.pack("<Q", len(payload)), payload]
    return b"".join(out)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint", offset=0)
    r = _Reader(data, "header")
    r.pos = 4
    version = r.u32()
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {version} is not supported "
                                      f"(this build reads version {FORMAT_VERSION})")
    count = r.u32()
    raw: dict[str, bytes] = {}
    skipped = []
    for _ in range(count):
        nlen = r.u16()
        try:
            name = r._take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("section name is not UTF-8", offset=r.pos) from None
        size = r.u64()
        payload = r._take(size)
        if name in raw:
            raise CheckpointError(f"duplicate section {name!r}")
        raw[name] = payload
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after the last section", offset=r.pos)
    known = {"scene", "scene_translation", "human", "skeleton", "lbs", "triplane", "decoder.nonrigid",
             "decoder.lbs_offset", "decoder.color", "train_state", "iteration", "provenance"}
    for name in raw:
        if name not in known:
            log.warning("event=checkpoint_unknown_section name=%s", name)
            skipped.append(name)
    if "scene" not in raw:
        raise CheckpointError("checkpoint has no scene section")
    scene = _read_cloud(_Reader(raw["scene"], "scene"))
    t_s = np.zeros(3)
    if "scene_translation" in raw:
        tr = _Reader(raw["scene_translation"], "scene_translation")
        t_s = tr.f32s(3)
        tr.done()
    human = None
    human_parts = ("human", "skeleton", "lbs", "triplane", "decoder.nonrigid", "decoder.lbs_offset", "decoder.color")
    present = [p in raw for p in human_parts]
    if any(present):
        if not all(present):
            missing = [p for p, ok in zip(human_parts, present) if not ok]
            raise CheckpointError(f"incomplete human sections, missing {missing}")
        try:
            dec = Decoders(_read_triplane(_Reader(raw["triplane"], "triplane")),
                           _read_mlp(_Reader(raw["decoder.nonrigid"], "decoder.nonrigid")),
                           _read_mlp(_Reader(raw["decoder.lbs_offset"], "decoder.lbs_offset")),
                           _read_mlp(_Reader(raw["decoder.color"], "decoder.color")))
            human = HumanAvatar(_read_cloud(_Reader(raw["human"], "human")),
                                _read_skeleton(_Reader(raw["skeleton"], "skeleton")),
                                _read_lbs(_Reader(raw["lbs"], "lbs")), dec)
        except ValueError as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"inconsistent human sections: {exc}") from None
    try:
        recon = Reconstruction(scene, human, t_s)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    state, iteration = (None, 0)
    if "train_state" in raw:
        state, iteration = _read_train_state(_Reader(raw["train_state"], "train_state"))
    elif "iteration" in raw:
        ir = _Reader(raw["iteration"], "iteration")
        iteration = ir.u64()
        ir.done()
    prov = {}
    if "provenance" in raw:
        try:
            prov = json.loads(raw["provenance"].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError, RecursionError):
            raise CheckpointError("provenance is not valid JSON") from None
        if not isinstance(prov, dict):
            raise CheckpointError("provenance must be an object")
    return Checkpoint(recon, state, iteration, prov, skipped)


def save_checkpoint(path, ckpt: Checkpoint | Reconstruction) -> bytes:
    if isinstance(ckpt, Reconstruction):
        ckpt = Checkpoint(ckpt)
    data = encode_checkpoint(ckpt)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
