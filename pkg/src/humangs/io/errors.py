"""Structured parse errors shared by every reader."""
from __future__ import annotations


class FormatError(ValueError):
    """Malformed input. ``line`` is 1-based, ``offset`` a byte position."""

    def __init__(self, message: str, *, line: int | None = None, offset: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.offset = offset


class PlyHeaderError(FormatError):
    pass


class PlyBodyError(FormatError):
    pass


class PlyTruncatedError(FormatError):
    pass


class PlyUnsupportedError(FormatError):
    pass


class ImageFormatError(FormatError):
    pass


class PoseFormatError(FormatError):
    pass


class CameraFormatError(FormatError):
    pass


class RigFormatError(FormatError):
    pass


class ConfigError(FormatError):
    pass


class ManifestError(FormatError):
    pass


class CheckpointError(FormatError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass
