"""Small procedural scenes for tests, benchmarks and the CLI demo dataset."""
from __future__ import annotations

import numpy as np

from .gaussians import GaussianCloud
from .render import Camera, look_at, render
from .train import View


def blob_cloud(n: int = 500, seed: int = 0, spread: float = 0.35, opacity: float = 0.8,
               scale_factor: float = 0.7) -> GaussianCloud:
    """Gaussian blob of isotropic splats with smoothly varying colours."""
    rng = np.random.default_rng(seed)
    pts = rng.normal(0.0, spread, (n, 3))
    col = 0.5 + 0.4 * np.stack([np.sin(2 * pts[:, 0] + 1), np.cos(3 * pts[:, 1]),
                                np.sin(2 * pts[:, 2] - pts[:, 0])], axis=1)
    cloud = GaussianCloud.from_points(pts, col, opacity=opacity)
    cloud.log_scales += np.log(scale_factor)
    return cloud


def orbit_cameras(count: int, offset: float = 0.0, size: int = 64, focal: float = 70.0, radius: float = 3.0,
                  target=(0.0, 0.0, 0.0), wobble: float = 0.4) -> list[Camera]:
    """Cameras on a ring around ``target`` with a sinusoidal elevation wobble."""
    cams = []
    target = np.asarray(target, dtype=np.float64)
    for i in range(count):
        a = 2 * np.pi * i / count + offset
        e = wobble * np.sin(3 * a + offset)
        eye = target + radius * np.array([np.cos(a) * np.cos(e), np.sin(e), np.sin(a) * np.cos(e)])
        cams.append(Camera(size, size, focal, focal, size / 2, size / 2, look_at(eye, target)))
    return cams


def render_views(cloud: GaussianCloud, cams: list[Camera], background=(0.0, 0.0, 0.0), with_mask: bool = False,
                 prefix: str = "view") -> list[View]:
    views = []
    for i, c in enumerate(cams):
        out = render(cloud, c, background, keep_cache=False)
        mask = out.alpha if with_mask else None
        views.append(View(out.color, c, mask, None, f"{prefix}_{i}"))
    return views


def perturbed_init(target: GaussianCloud, seed: int = 1, jitter: float = 0.05, gray: float = 0.5,
                   opacity: float = 0.1) -> GaussianCloud:
    """Fresh cloud at jittered target positions: flat colour, low opacity, kNN scales."""
    rng = np.random.default_rng(seed)
    pts = target.positions + rng.normal(0.0, jitter, target.positions.shape)
    return GaussianCloud.from_points(pts, np.full((len(pts), 3), gray), opacity=opacity,
                                     sh_degree=target.sh_degree)
