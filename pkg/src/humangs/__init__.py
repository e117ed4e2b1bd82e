"""Animatable human and scene reconstruction with 3D Gaussians."""
from __future__ import annotations

__version__ = "0.1.0"

from .gaussians import GaussianCloud
from .reconstruction import HumanAvatar, Reconstruction
from .render import Camera, render

__all__ = ["Camera", "GaussianCloud", "HumanAvatar", "Reconstruction", "render", "__version__"]
