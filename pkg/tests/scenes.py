"""Random scenes and finite-difference drivers shared by the renderer and acceptance tests."""
from __future__ import annotations

import numpy as np

from humangs.gaussians import GaussianCloud, sh_coeff_count
from humangs.render import Camera, look_at, render, render_backward
from oracles import rel_err


def random_cloud(n: int, seed: int, sh_degree: int = 0, depth=(2.5, 4.0), spread: float = 0.8,
                 scale=(-3.0, -1.6)) -> GaussianCloud:
    rng = np.random.default_rng(seed)
    pos = np.column_stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n), rng.uniform(*depth, n)])
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    ls = rng.uniform(*scale, size=(n, 3))
    op = rng.uniform(-2.0, 2.0, n)
    sh = rng.normal(0.0, 0.6, size=(n, sh_coeff_count(sh_degree), 3))
    return GaussianCloud(pos, q, ls, op, sh)


def front_camera(size: int = 64, focal: float | None = None) -> Camera:
    f = focal if focal is not None else 1.2 * size
    return Camera(size, size, f, f, size / 2, size / 2, look_at([0, 0, 0], [0, 0, 1]))


def fd_check_render(cloud: GaussianCloud, cam: Camera, seed: int, h: float = 1e-4, max_gaussians: int | None = None,
                    floor: float = 1e-6):
    """Compare render_backward with central differences of <gc, color> + <ga, alpha>.

    Returns (worst relative error, compared entries, skipped entries). Entries whose +-h renders
    change a discrete choice (depth order, 3-sigma support, clamps) are skipped.
    """
    rng = np.random.default_rng(seed)
    H, W = cam.height, cam.width
    gc = rng.normal(size=(H, W, 3))
    ga = rng.normal(size=(H, W))
    out = render(cloud, cam)
    grads = render_backward(cloud, cam, gc, ga, out.cache).as_dict()
    ref_sig = out.cache.support_signature()
    ids = np.arange(len(cloud))
    if max_gaussians is not None and len(cloud) > max_gaussians:
        ids = rng.choice(len(cloud), max_gaussians, replace=False)
    worst, checked, skipped = 0.0, 0, 0
    for name in GaussianCloud.ATTRIBUTES:
        arr = getattr(cloud, name)
        for i in ids:
            for sub in np.ndindex(arr.shape[1:]):
                idx = (i, *sub)
                old = arr[idx]
                vals, sigs = [], []
                for step in (h, -h):
                    arr[idx] = old + step
                    o = render(cloud, cam)
                    vals.append(float(np.sum(o.color * gc) + np.sum(o.alpha * ga)))
                    sigs.append(o.cache.support_signature())
                arr[idx] = old
                if sigs[0] != ref_sig or sigs[1] != ref_sig:
                    skipped += 1
                    continue
                fd = (vals[0] - vals[1]) / (2 * h)
                worst = max(worst, rel_err(fd, grads[name][idx], floor))
                checked += 1
    return worst, checked, skipped
