"""Readers and writers for every on-disk format."""
from .errors import (
    CameraFormatError,
    CheckpointError,
    ConfigError,
    FormatError,
    ImageFormatError,
    ManifestError,
    PlyBodyError,
    PlyHeaderError,
    PlyTruncatedError,
    PlyUnsupportedError,
    PoseFormatError,
    RigFormatError,
    UnsupportedVersionError,
)

__all__ = [
    "CameraFormatError",
    "CheckpointError",
    "ConfigError",
    "FormatError",
    "ImageFormatError",
    "ManifestError",
    "PlyBodyError",
    "PlyHeaderError",
    "PlyTruncatedError",
    "PlyUnsupportedError",
    "PoseFormatError",
    "RigFormatError",
    "UnsupportedVersionError",
]
