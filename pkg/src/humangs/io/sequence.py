"""Image-sequence directories: frame_%05d.png plus manifest.txt.

manifest.txt holds ``fps <value>`` on its first line followed by one frame
filename per line, in playback order.
"""
from __future__ import annotations

import math
from pathlib import Path

from .errors import ManifestError
from .images import save_image

FRAME_PATTERN = "frame_{:05d}.png"


def write_manifest(path, names, fps: float) -> None:
    Path(path).write_text(f"fps {fps!r}\n" + "".join(f"{n}\n" for n in names))


def parse_manifest(text: str) -> tuple[list[str], float]:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise ManifestError("manifest is empty", line=1)
    head = lines[0].split()
    if len(head) != 2 or head[0] != "fps":
        raise ManifestError("first manifest line must be 'fps <value>'", line=1)
    try:
        fps = float(head[1])
    except ValueError:
        raise ManifestError("fps is not a number", line=1) from None
    if not math.isfinite(fps) or fps <= 0:
        raise ManifestError("fps must be positive", line=1)
    names = lines[1:]
    for i, n in enumerate(names, start=2):
        if "/" in n or "\\" in n or n in (".", ".."):
            raise ManifestError(f"frame name {n!r} must be a bare filename", line=i)
    return names, fps


def read_manifest(path) -> tuple[list[str], float]:
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ManifestError("manifest is not UTF-8", offset=exc.start) from None
    return parse_manifest(text)


def write_image_sequence(directory, frames, fps: float = 30.0) -> list[str]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, f in enumerate(frames):
        name = FRAME_PATTERN.format(i)
        save_image(d / name, f)
        names.append(name)
    write_manifest(d / "manifest.txt", names, fps)
    return names
