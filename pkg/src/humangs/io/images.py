"""8-bit image codecs: PNG through Pillow, binary PPM (P6) in pure Python."""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .errors import ImageFormatError

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def to_uint8(img) -> np.ndarray:
    """Float images in [0, 1] are quantised with round-half-up; uint8 passes through."""
    a = np.asarray(img)
    if a.dtype == np.uint8:
        return a
    return np.floor(np.clip(a.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def to_float(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


# --------------------------------------------------------------------------
# PPM


def encode_ppm(img) -> bytes:
    a = to_uint8(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) image")
    h, w = a.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(a).tobytes()


def _ppm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("PPM header ended early", offset=pos)
    return data[start:pos], pos


def decode_ppm(data: bytes) -> np.ndarray:
    """uint8 (H, W, 3) from P6 bytes with maxval <= 255."""
    if len(data) < 2 or data[:2] != b"P6":
        raise ImageFormatError("not a binary PPM (missing P6 magic)", offset=0)
    pos = 2
    values = []
    for label in ("width", "height", "maxval"):
        tok, pos = _ppm_token(data, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"PPM {label} is not a decimal integer", offset=pos - len(tok))
        values.append(int(tok))
    w, h, maxval = values
    if w < 1 or h < 1:
        raise ImageFormatError("PPM has zero size")
    if maxval < 1 or maxval > 255:
        raise ImageFormatError(f"unsupported PPM maxval {maxval}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("PPM header must end with one whitespace byte", offset=pos)
    pos += 1
    need = w * h * 3
    if len(data) - pos < need:
        raise ImageFormatError(f"PPM body truncated: need {need} bytes, have {len(data) - pos}", offset=pos)
    a = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()
    if maxval != 255:
        a = np.floor(a.astype(np.float64) * 255.0 / maxval + 0.5).astype(np.uint8)
    return a


# --------------------------------------------------------------------------
# PNG


def encode_png(img, alpha=None) -> bytes:
    from PIL import Image

    a = to_uint8(img)
    if a.ndim != 3 or a.shape[2] not in (3, 4):
        raise ValueError("PNG needs an (H, W, 3) or (H, W, 4) image")
    if alpha is not None:
        a = np.concatenate([a[..., :3], to_uint8(alpha)[..., None]], axis=2)
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(a), "RGBA" if a.shape[2] == 4 else "RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes, keep_alpha: bool = False) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    if not data.startswith(PNG_MAGIC):
        raise ImageFormatError("not a PNG (bad signature)", offset=0)
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode not in ("RGB", "RGBA", "L", "LA", "P", "1"):
                raise ImageFormatError(f"unsupported PNG mode {im.mode}")
            mode = "RGBA" if keep_alpha else "RGB"
            return np.asarray(im.convert(mode), dtype=np.uint8).copy()
    except ImageFormatError:
        raise
    except (UnidentifiedImageError, OSError, ValueError, SyntaxError, EOFError,
            MemoryError, Image.DecompressionBombError) as exc:
        raise ImageFormatError(f"corrupt PNG: {exc}") from None


def decode_gray_png(data: bytes) -> np.ndarray:
    from PIL import Image

    rgb = decode_png(data)
    return np.asarray(Image.fromarray(rgb).convert("L"), dtype=np.uint8)


# --------------------------------------------------------------------------
# path helpers


def decode_image(data: bytes) -> np.ndarray:
    """uint8 (H, W, 3) from PNG or PPM bytes, chosen by signature."""
    if len(data) == 0:
        raise ImageFormatError("empty image file", offset=0)
    if data.startswith(PNG_MAGIC):
        return decode_png(data)
    if data.startswith(b"P6"):
        return decode_ppm(data)
    raise ImageFormatError("unrecognised image signature", offset=0)


def load_image_u8(path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


def load_image(path) -> np.ndarray:
    """Float (H, W, 3) in [0, 1]."""
    return to_float(load_image_u8(path))


def load_mask(path) -> np.ndarray:
    """Binary float mask (H, W) from a PNG/PPM: pixels brighter than mid-grey are foreground."""
    data = Path(path).read_bytes()
    a = decode_gray_png(data) if data.startswith(PNG_MAGIC) else decode_image(data).mean(axis=2)
    return (np.asarray(a, dtype=np.float64) >= 127.5).astype(np.float64)


def save_png(path, img, alpha=None) -> None:
    Path(path).write_bytes(encode_png(img, alpha))


def save_ppm(path, img) -> None:
    Path(path).write_bytes(encode_ppm(img))


def save_image(path, img) -> None:
    """PPM for .ppm paths, PNG otherwise."""
    if str(path).lower().endswith(".ppm"):
        save_ppm(path, img)
    else:
        save_png(path, img)
