"""PLY point sets: ASCII and binary little-endian, positions plus optional u8 colour."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PlyBodyError, PlyHeaderError, PlyTruncatedError, PlyUnsupportedError

_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class PointSet:
    positions: np.ndarray  # (N, 3) float64 holding float32-exact values for float32 files
    colors: np.ndarray | None = None  # (N, 3) uint8

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class _Property:
    name: str
    dtype: str
    count_dtype: str | None = None  # set for list properties


@dataclass
class _Element:
    name: str
    count: int
    props: list[_Property]


def _parse_header(data: bytes):
    if not data.startswith(b"ply"):
        raise PlyHeaderError("missing 'ply' magic", line=1, offset=0)
    end = data.find(b"end_header")
    if end < 0:
        raise PlyHeaderError("header has no end_header")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyHeaderError("end_header is not terminated by a newline", offset=end)
    try:
        text = data[:nl].decode("ascii")
    except UnicodeDecodeError as exc:
        raise PlyHeaderError("header is not ASCII", offset=exc.start) from None
    fmt = None
    elements: list[_Element] = []
    for lineno, raw in enumerate(text.split("\n"), start=1):
        parts = raw.strip().split()
        if not parts or parts[0] in ("comment", "obj_info") or (lineno == 1 and parts == ["ply"]):
            continue
        key = parts[0]
        if key == "format":
            if len(parts) != 3:
                raise PlyHeaderError("bad format line", line=lineno)
            fmt = parts[1]
            if parts[2] != "1.0":
                raise PlyUnsupportedError(f"unsupported PLY version {parts[2]}", line=lineno)
        elif key == "element":
            if len(parts) != 3:
                raise PlyHeaderError("bad element line", line=lineno)
            try:
                count = int(parts[2])
            except ValueError:
                raise PlyHeaderError(f"element count {parts[2]!r} is not an integer", line=lineno) from None
            if count < 0:
                raise PlyHeaderError("negative element count", line=lineno)
            elements.append(_Element(parts[1], count, []))
        elif key == "property":
            if not elements:
                raise PlyHeaderError("property before any element", line=lineno)
            if len(parts) == 5 and parts[1] == "list":
                if parts[2] not in _TYPES or parts[3] not in _TYPES:
                    raise PlyHeaderError("unknown list property type", line=lineno)
                elements[-1].props.append(_Property(parts[4], _TYPES[parts[3]], _TYPES[parts[2]]))
            elif len(parts) == 3:
                if parts[1] not in _TYPES:
                    raise PlyHeaderError(f"unknown property type {parts[1]!r}", line=lineno)
                elements[-1].props.append(_Property(parts[2], _TYPES[parts[1]]))
            else:
                raise PlyHeaderError("bad property line", line=lineno)
        elif key == "end_header":
            break
        else:
            raise PlyHeaderError(f"unexpected header keyword {key!r}", line=lineno)
    if fmt is None:
        raise PlyHeaderError("header has no format line")
    if fmt == "binary_big_endian":
        raise PlyUnsupportedError("big-endian PLY bodies are not supported")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyHeaderError(f"unknown PLY format {fmt!r}")
    vertex = [e for e in elements if e.name == "vertex"]
    if len(vertex) != 1:
        raise PlyHeaderError("PLY must declare exactly one vertex element")
    names = [p.name for p in vertex[0].props]
    for axis in "xyz":
        if axis not in names:
            raise PlyHeaderError(f"vertex element lacks property {axis!r}")
    header_lines = text.count("\n") + 1
    return fmt, elements, nl + 1, header_lines


def _vertex_arrays(el: _Element, columns: dict[str, np.ndarray]) -> PointSet:
    pos = np.stack([columns[a] for a in "xyz"], axis=1).astype(np.float64)
    colors = None
    if all(c in columns for c in ("red", "green", "blue")):
        for c in ("red", "green", "blue"):
            prop = next(p for p in el.props if p.name == c)
            if prop.dtype != "u1":
                raise PlyUnsupportedError(f"colour property {c!r} must be uchar")
        colors = np.stack([columns[c] for c in ("red", "green", "blue")], axis=1).astype(np.uint8)
    return PointSet(pos, colors)


def _parse_ascii(data: bytes, elements, body_start: int, header_lines: int) -> PointSet:
    try:
        text = data[body_start:].decode("ascii")
    except UnicodeDecodeError as exc:
        raise PlyBodyError("ASCII body contains non-ASCII bytes", offset=body_start + exc.start) from None
    lines = text.split("\n")
    li = 0
    result = None
    for el in elements:
        cols: dict[str, list] = {p.name: [] for p in el.props}
        for _ in range(el.count):
            while li < len(lines) and not lines[li].strip():
                li += 1
            if li >= len(lines):
                raise PlyTruncatedError(f"element {el.name!r} declares {el.count} rows, body ended early",
                                        line=header_lines + li + 1)
            tokens = lines[li].split()
            lineno = header_lines + li + 1
            li += 1
            t = 0
            for p in el.props:
                try:
                    if p.count_dtype is not None:
                        n = int(tokens[t])
                        if n < 0:
                            raise ValueError
                        vals = [float(v) for v in tokens[t + 1:t + 1 + n]]
                        if len(vals) != n:
                            raise IndexError
                        t += 1 + n
                        cols[p.name].append(vals)
                    else:
                        v = float(tokens[t]) if p.dtype[0] == "f" else int(tokens[t])
                        cols[p.name].append(v)
                        t += 1
                except IndexError:
                    raise PlyTruncatedError(f"row of {el.name!r} has too few values", line=lineno) from None
                except ValueError:
                    raise PlyBodyError(f"bad value for property {p.name!r}", line=lineno) from None
            if t != len(tokens):
                raise PlyBodyError(f"row of {el.name!r} has extra values", line=lineno)
        if el.name == "vertex":
            arrays = {}
            for p in el.props:
                if p.count_dtype is not None:
                    continue
                try:
                    if p.dtype[0] in "iu":
                        info = np.iinfo(p.dtype)
                        if any(not info.min <= v <= info.max for v in cols[p.name]):
                            raise OverflowError
                    arrays[p.name] = np.array(cols[p.name], dtype=p.dtype).reshape(el.count)
                except (OverflowError, ValueError):
                    raise PlyBodyError(f"value out of range for property {p.name!r}") from None
            result = _vertex_arrays(el, arrays)
            break
    return result


def _parse_binary(data: bytes, elements, body_start: int) -> PointSet:
    pos = body_start
    for el in elements:
        if all(p.count_dtype is None for p in el.props):
            dt = np.dtype([(f"p{i}", "<" + p.dtype) for i, p in enumerate(el.props)])
            need = dt.itemsize * el.count
            if pos + need > len(data):
                raise PlyTruncatedError(
                    f"element {el.name!r} needs {need} bytes, {max(len(data) - pos, 0)} available", offset=pos)
            rows = np.frombuffer(data, dtype=dt, count=el.count, offset=pos) if el.count else np.zeros(0, dt)
            pos += need
            if el.name == "vertex":
                arrays = {p.name: rows[f"p{i}"].astype(p.dtype) for i, p in enumerate(el.props)}
                return _vertex_arrays(el, arrays)
            continue
        if el.name == "vertex":
            raise PlyUnsupportedError("list properties on vertices are not supported")
        for _ in range(el.count):
            for p in el.props:
                if p.count_dtype is None:
                    size = np.dtype(p.dtype).itemsize
                else:
                    csize = np.dtype(p.count_dtype).itemsize
                    if pos + csize > len(data):
                        raise PlyTruncatedError(f"truncated list in element {el.name!r}", offset=pos)
                    n = int(np.frombuffer(data, dtype="<" + p.count_dtype, count=1, offset=pos)[0])
                    if n < 0:
                        raise PlyBodyError("negative list length", offset=pos)
                    pos += csize
                    size = n * np.dtype(p.dtype).itemsize
                if pos + size > len(data):
                    raise PlyTruncatedError(f"truncated element {el.name!r}", offset=pos)
                pos += size
    raise PlyHeaderError("no vertex element")


def parse_ply(data: bytes) -> PointSet:
    fmt, elements, body_start, header_lines = _parse_header(data)
    if fmt == "ascii":
        return _parse_ascii(data, elements, body_start, header_lines)
    return _parse_binary(data, elements, body_start)


def load_ply(path) -> PointSet:
    return parse_ply(Path(path).read_bytes())


def quantize_color(rgb) -> np.ndarray:
    """Float [0, 1] colour to u8 with round-half-up: floor(x * 255 + 0.5)."""
    x = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def encode_ply(positions, colors=None, binary: bool = True) -> bytes:
    pos = np.asarray(positions, dtype=np.float32).reshape(-1, 3)
    n = len(pos)
    if colors is not None:
        colors = np.asarray(colors)
        if colors.dtype != np.uint8:
            colors = quantize_color(colors)
        colors = colors.reshape(n, 3)
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {n}",
            "property float x", "property float y", "property float z"]
    if colors is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head.append("end_header")
    out = ("\n".join(head) + "\n").encode("ascii")
    if binary:
        fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
        if colors is not None:
            fields += [("r", "u1"), ("g", "u1"), ("b", "u1")]
        rows = np.zeros(n, dtype=fields)
        rows["x"], rows["y"], rows["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
        if colors is not None:
            rows["r"], rows["g"], rows["b"] = colors[:, 0], colors[:, 1], colors[:, 2]
        return out + rows.tobytes()
    lines = []
    for i in range(n):
        # repr of a float32 round-trips exactly through float()
        vals = [repr(float(v)) if math.isfinite(v) else str(float(v)) for v in pos[i]]
        if colors is not None:
            vals += [str(int(c)) for c in colors[i]]
        lines.append(" ".join(vals))
    return out + "".join(line + "\n" for line in lines).encode("ascii")


def save_ply(path, positions, colors=None, binary: bool = True) -> None:
    Path(path).write_bytes(encode_ply(positions, colors, binary))


def save_cloud_ply(cloud, path, binary: bool = True) -> None:
    """Export Gaussian centres with their view-independent colour."""
    from ..gaussians import SH_C0

    rgb = np.clip(SH_C0 * cloud.sh[:, 0, :] + 0.5, 0.0, 1.0) if len(cloud) else np.zeros((0, 3))
    save_ply(path, cloud.positions, quantize_color(rgb), binary)
