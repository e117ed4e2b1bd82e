"""Regenerates the binary fixtures in this directory: python tests/fixtures/make_fixtures.py"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from humangs.articulation import toy_biped, toy_biped_mesh
from humangs.io.checkpoint import Checkpoint, encode_checkpoint
from humangs.reconstruction import Reconstruction, build_avatar
from humangs.synthetic import blob_cloud

HERE = Path(__file__).parent


def tiny_checkpoint() -> bytes:
    mesh, w = toy_biped_mesh(0)
    av = build_avatar(mesh, w, toy_biped(), 24, 0, feature_dim=2, plane_resolution=3, hidden=4)
    av.canonical.sh[:, 0, :] = np.linspace(-1.0, 1.0, 3 * len(av.canonical)).reshape(-1, 3)
    recon = Reconstruction(blob_cloud(40, seed=2, spread=0.3), av, np.zeros(3))
    return encode_checkpoint(Checkpoint(recon, None, 5, {"seed": 0, "history": ["fixture"]}))


if __name__ == "__main__":
    (HERE / "tiny.hgsc").write_bytes(tiny_checkpoint())
