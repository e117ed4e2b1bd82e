"""Optimisation loop: Adam over Gaussian attributes and decoder weights with density control."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .articulation import LbsWeightMatrix, PoseFrame
from .gaussians import GaussianCloud, quat_to_matrix, quat_normalize
from .losses import (
    DEFAULT_PERCEPTUAL,
    LossWeights,
    PerceptualBackend,
    RegionSet,
    perceptual_loss,
    psnr,
    recon_objective,
    ssim,
)
from .reconstruction import Reconstruction
from .render import Camera, render, render_backward

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class View:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    camera: Camera
    mask: np.ndarray | None = None
    pose: PoseFrame | None = None
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.shape != (self.camera.height, self.camera.width, 3):
            raise ValueError(f"view image {self.image.shape} does not match camera "
                             f"{self.camera.width}x{self.camera.height}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float64)
            if self.mask.shape != self.image.shape[:2]:
                raise ValueError("mask shape does not match image")


@dataclass
class TrainConfig:
    iterations: int = 10000
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 1e-3
    lr_rotation: float = 1e-3
    lr_decoder: float = 1e-3
    spatial_lr_scale: float | None = None  # None: derive from camera spread
    weights: LossWeights = field(default_factory=LossWeights)
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int | None = None  # None: half of the run
    densify_grad_threshold: float = 2e-4
    densify_scale_fraction: float = 0.01
    prune_opacity_threshold: float = 0.005
    max_gaussians: int = 200_000
    seed: int = 0
    region_set: RegionSet | None = None
    critique_max_rounds: int = 4
    critique_round_iterations: int = 2000
    critique_cumulative_regions: bool = False
    enhance_outer_E: int = 2
    enhance_inner_T: int = 2500
    enhance_scope: str = "joint"
    log_interval: int = 10
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    view_sampling: str = "random"
    ssim_literal: bool = False
    mask_squared: bool = False
    max_nonfinite_steps: int = 10

    def __post_init__(self):
        if isinstance(self.weights, Mapping):
            self.weights = LossWeights(**self.weights)
        self.validate()

    def validate(self) -> None:
        if int(self.iterations) < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("lr_position", "lr_position_final", "lr_sh", "lr_opacity", "lr_scale", "lr_rotation",
                     "lr_decoder", "densify_grad_threshold", "densify_scale_fraction", "prune_opacity_threshold"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")
        if self.densify_interval < 1 or self.log_interval < 1:
            raise ValueError("intervals must be >= 1")
        if self.max_gaussians < 1:
            raise ValueError("max_gaussians must be >= 1")
        if self.critique_max_rounds < 1:
            raise ValueError("critique_max_rounds must be >= 1")
        if self.enhance_outer_E < 1 or self.enhance_inner_T < 1:
            raise ValueError("enhancement needs E >= 1 and T >= 1")
        if self.enhance_scope not in ("joint", "human"):
            raise ValueError("enhance_scope must be 'joint' or 'human'")
        if self.view_sampling not in ("random", "cycle", "first"):
            raise ValueError("view_sampling must be random, cycle or first")


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()},
                         self.step, self.skipped)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | Mapping[str, float]) -> bool:
    """Bias-corrected Adam update applied in place. Returns False (and counts a
    skip) when any gradient is non-finite, leaving params and moments untouched."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient {k} has shape {g.shape}, parameter has {params[k].shape}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("event=adam_skip param=%s skipped=%d", k, state.skipped)
            return False
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for k, g in grads.items():
        p = params[k]
        m = state.m.get(k)
        if m is None or m.shape != p.shape:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        rate = lr if isinstance(lr, (int, float)) else lr[k]
        if rate:
            p -= rate * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return True


def remap_moments(state: AdamState, names, origin: np.ndarray, n_kept: int) -> None:
    """Reindex per-Gaussian moments after density control; new Gaussians start at zero."""
    for k in names:
        if k not in state.m:
            continue
        for store in (state.m, state.v):
            old = store[k]
            new = np.zeros((len(origin),) + old.shape[1:])
            new[:n_kept] = old[origin[:n_kept]]
            store[k] = new


# --------------------------------------------------------------------------
# density control


@dataclass
class DensityStats:
    grad_sum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensityStats":
        return cls(np.zeros(n), np.zeros(n))

    def add(self, means2d_grad: np.ndarray) -> None:
        norm = np.linalg.norm(means2d_grad, axis=1)
        seen = norm > 0
        self.grad_sum[seen] += norm[seen]
        self.count[seen] += 1

    def average(self) -> np.ndarray:
        return self.grad_sum / np.maximum(self.count, 1)


@dataclass
class DensifyResult:
    cloud: GaussianCloud
    origin: np.ndarray  # source index in the input cloud for each output Gaussian
    n_kept: int  # leading outputs that are surviving originals
    cloned: int = 0
    split: int = 0
    pruned: int = 0


def densify_and_prune(cloud: GaussianCloud, stats: DensityStats, cfg: TrainConfig, rng=None,
                      scene_extent: float = 1.0, max_gaussians: int | None = None) -> DensifyResult:
    """Clone small high-gradient Gaussians, split large ones into two children
    sampled from their own distribution with scales divided by 1.6, then prune
    transparent or non-finite ones. The output never exceeds ``max_gaussians``.
    """
    n = len(cloud)
    if len(stats.grad_sum) != n:
        raise ValueError("density statistics are not aligned with the cloud")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    cap = cfg.max_gaussians if max_gaussians is None else max_gaussians
    avg = stats.average()
    high = avg >= cfg.densify_grad_threshold if cfg.densify_grad_threshold > 0 else avg > 0
    big = cloud.scales.max(axis=1) > cfg.densify_scale_fraction * scene_extent if n else np.zeros(0, bool)
    cand = np.flatnonzero(high)
    budget = max(0, cap - n)
    if len(cand) > budget:
        order = np.argsort(-avg[cand], kind="stable")
        cand = np.sort(cand[order[:budget]])
    clone = cand[~big[cand]]
    split = cand[big[cand]]

    keep = np.ones(n, dtype=bool)
    keep[split] = False
    kept = np.flatnonzero(keep)
    parts = [cloud.subset(kept), cloud.subset(clone)]
    origin = [kept, clone]
    if len(split):
        children = cloud.subset(np.repeat(split, 2))
        s = np.exp(children.log_scales)
        R = quat_to_matrix(quat_normalize(children.rotations))
        offset = np.einsum("nab,nb->na", R, rng.standard_normal((len(children), 3)) * s)
        children.positions = children.positions + offset
        children.log_scales = children.log_scales - math.log(1.6)
        parts.append(children)
        origin.append(np.repeat(split, 2))
    out = GaussianCloud.concat(parts, space=cloud.space)
    origin = np.concatenate(origin).astype(np.int64)

    alive = out.opacities >= cfg.prune_opacity_threshold
    for a in GaussianCloud.ATTRIBUTES:
        arr = getattr(out, a)
        alive &= np.all(np.isfinite(arr.reshape(len(out), -1)), axis=1)
    if alive.sum() > cap:
        # keep the most opaque survivors, preserving order
        idx = np.flatnonzero(alive)
        top = idx[np.argsort(-out.opacities[idx], kind="stable")[:cap]]
        alive[:] = False
        alive[top] = True
    n_kept = int(alive[:len(kept)].sum())
    out = out.subset(alive)
    origin = origin[alive]
    return DensifyResult(out, origin, n_kept, len(clone), len(split), int(n + len(clone) + len(split) - len(out)))


# --------------------------------------------------------------------------
# report / evaluation


@dataclass
class TrainReport:
    iterations: list[int] = field(default_factory=list)
    losses: list[dict[str, float]] = field(default_factory=list)
    gaussian_counts: list[int] = field(default_factory=list)
    skipped_steps: int = 0
    steps_run: int = 0
    final_metrics: dict | None = None
    wall_clock: float = 0.0

    def loss_series(self) -> list[float]:
        return [d["total"] for d in self.losses]

    def as_dict(self) -> dict:
        return {"iterations": self.iterations, "losses": self.losses, "gaussian_counts": self.gaussian_counts,
                "skipped_steps": self.skipped_steps, "steps_run": self.steps_run,
                "final_metrics": self.final_metrics, "wall_clock": self.wall_clock}


@dataclass
class EvalMetrics:
    per_view: list[dict[str, float]]
    mean: dict[str, float]

    def as_dict(self) -> dict:
        return {"per_view": self.per_view, "mean": self.mean}


def evaluate(recon: Reconstruction, views: list[View], background=(0.0, 0.0, 0.0),
             perceptual: PerceptualBackend | None = DEFAULT_PERCEPTUAL) -> EvalMetrics:
    """PSNR / SSIM / perceptual per view and averaged; does not modify ``recon``."""
    if not views:
        raise ValueError("evaluation needs at least one view")
    per_view = []
    for v in views:
        out = render(recon.compose(v.pose), v.camera, background, keep_cache=False)
        rec = {"psnr": psnr(out.color, v.image), "ssim": ssim(out.color, v.image)}
        if perceptual is not None:
            rec["perceptual"] = perceptual_loss(out.color, v.image, perceptual)
        per_view.append(rec)
    mean = {k: float(np.mean([r[k] for r in per_view])) for k in per_view[0]}
    return EvalMetrics(per_view, mean)


# --------------------------------------------------------------------------
# training


def camera_extent(cameras) -> float:
    """Radius of the camera-centre spread, 1.1x the max distance from their mean."""
    centers = np.array([c.center for c in cameras])
    if len(centers) < 2:
        return 1.0
    r = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1))) * 1.1
    return r if r > 0 else 1.0


_GROUP_OF = {"positions": "position", "sh": "sh", "opacity_logits": "opacity", "log_scales": "scale",
             "rotations": "rotation"}


class Trainer:
    """Owns a copy of the reconstruction, its optimiser state and density statistics."""

    def __init__(self, recon: Reconstruction, views: list[View], cfg: TrainConfig,
                 region_sets: RegionSet | Mapping[int, RegionSet] | None = None,
                 perceptual: PerceptualBackend | None = DEFAULT_PERCEPTUAL,
                 trainable: set[str] | None = None, total_iterations: int | None = None,
                 state: AdamState | None = None):
        if not views:
            raise ValueError("training needs at least one view")
        shapes = {v.image.shape for v in views}
        if len(shapes) != 1:
            raise ValueError(f"views have inconsistent resolutions: {sorted(shapes)}")
        cfg.validate()
        self.recon = recon.copy()
        self.views = views
        self.cfg = cfg
        self.perceptual = perceptual
        self.region_sets = cfg.region_set if region_sets is None else region_sets
        self.trainable = trainable  # None: everything; else set of prefixes ("scene", "human", "decoder")
        self.total = cfg.iterations if total_iterations is None else total_iterations
        self.state = AdamState() if state is None else state.copy()
        self.rng = np.random.default_rng(cfg.seed)
        self.extent = camera_extent([v.camera for v in views])
        self.spatial = cfg.spatial_lr_scale if cfg.spatial_lr_scale is not None else self.extent
        self.iteration = 0
        self.report = TrainReport()
        self._nonfinite = 0
        self._stats = self._fresh_stats()
        self._start = time.perf_counter()

    def _fresh_stats(self) -> dict[str, DensityStats]:
        out = {"scene": DensityStats.zeros(len(self.recon.scene))}
        if self.recon.human is not None:
            out["human"] = DensityStats.zeros(len(self.recon.human.canonical))
        return out

    def _regions_for(self, view_index: int) -> RegionSet | None:
        rs = self.region_sets
        if rs is None or isinstance(rs, RegionSet):
            return rs
        return rs.get(view_index)

    def _pick_view(self) -> int:
        mode = self.cfg.view_sampling
        if mode == "first":
            return 0
        if mode == "cycle":
            return self.iteration % len(self.views)
        return int(self.rng.integers(len(self.views)))

    def learning_rates(self, names) -> dict[str, float]:
        cfg = self.cfg
        frac = min(self.iteration / max(self.total - 1, 1), 1.0)
        if cfg.lr_position > 0 and cfg.lr_position_final > 0:
            pos = math.exp((1 - frac) * math.log(cfg.lr_position) + frac * math.log(cfg.lr_position_final))
        else:
            pos = cfg.lr_position
        base = {"position": pos * self.spatial, "sh": cfg.lr_sh, "opacity": cfg.lr_opacity, "scale": cfg.lr_scale,
                "rotation": cfg.lr_rotation}
        out = {}
        for k in names:
            prefix, _, attr = k.partition(".")
            if self.trainable is not None and prefix not in self.trainable:
                out[k] = 0.0
            elif prefix == "decoder" or attr == "lbs_offsets":
                out[k] = cfg.lr_decoder
            else:
                out[k] = base[_GROUP_OF[attr]]
        return out

    def step(self) -> dict[str, float] | None:
        """One optimisation step; returns the loss breakdown (None when skipped)."""
        cfg = self.cfg
        vi = self._pick_view()
        view = self.views[vi]
        world, tape = self.recon.compose(view.pose, with_tape=True)
        out = render(world, view.camera, cfg.background)
        obj = recon_objective(out.color, out.alpha, view.image, view.mask, cfg.weights, self._regions_for(vi),
                              self.perceptual, cfg.ssim_literal, cfg.mask_squared)
        self.iteration += 1
        self.report.steps_run += 1
        result = None
        ok = math.isfinite(obj.value)
        if ok:
            cg = render_backward(world, view.camera, obj.grad_color, obj.grad_alpha, out.cache)
            grads, means2d = self.recon.backward(tape, cg)
            params = self.recon.parameters()
            ok = adam_step(params, grads, self.state, self.learning_rates(params))
            if ok:
                ns = len(self.recon.scene)
                self._stats["scene"].add(means2d[:ns])
                if "human" in self._stats:
                    self._stats["human"].add(means2d[ns:])
                result = obj.breakdown.as_dict()
        else:
            self.state.skipped += 1
        if ok:
            self._nonfinite = 0
        else:
            self._nonfinite += 1
            self.report.skipped_steps += 1
            if self._nonfinite >= cfg.max_nonfinite_steps:
                raise TrainingDivergedError(
                    f"{self._nonfinite} consecutive non-finite steps at iteration {self.iteration} "
                    f"(view {vi}, loss {obj.value}, gaussians {self.recon.num_gaussians})")
        if result is not None and (self.iteration % cfg.log_interval == 0 or self.iteration == 1):
            self.report.iterations.append(self.iteration)
            self.report.losses.append(result)
            self.report.gaussian_counts.append(self.recon.num_gaussians)
        self._maybe_densify()
        return result

    def _maybe_densify(self) -> None:
        cfg = self.cfg
        until = cfg.densify_until if cfg.densify_until is not None else self.total // 2
        it = self.iteration
        if it < cfg.densify_from or it > until or it % cfg.densify_interval:
            return
        self.densify()

    def densify(self) -> None:
        cfg = self.cfg
        r = self.recon
        other = len(r.human.canonical) if r.human is not None else 0
        res = densify_and_prune(r.scene, self._stats["scene"], cfg, self.rng, self.extent,
                                max_gaussians=cfg.max_gaussians - other)
        r.scene = res.cloud
        remap_moments(self.state, [f"scene.{a}" for a in GaussianCloud.ATTRIBUTES], res.origin, res.n_kept)
        if r.human is not None:
            h = r.human
            res = densify_and_prune(h.canonical, self._stats["human"], cfg, self.rng, self.extent,
                                    max_gaussians=cfg.max_gaussians - len(r.scene))
            h.canonical = res.cloud
            h.weights = LbsWeightMatrix(h.weights.base_weights[res.origin],
                                        h.weights.learned_logit_offsets[res.origin])
            names = [f"human.{a}" for a in GaussianCloud.ATTRIBUTES] + ["human.lbs_offsets"]
            remap_moments(self.state, names, res.origin, res.n_kept)
        self._stats = self._fresh_stats()

    def run(self, steps: int) -> TrainReport:
        for _ in range(steps):
            self.step()
        self.report.wall_clock = time.perf_counter() - self._start
        return self.report


def train(recon: Reconstruction, views: list[View], cfg: TrainConfig,
          region_sets: RegionSet | Mapping[int, RegionSet] | None = None,
          heldout: list[View] | None = None,
          perceptual: PerceptualBackend | None = DEFAULT_PERCEPTUAL) -> tuple[Reconstruction, TrainReport]:
    """Optimise a copy of ``recon`` against ``views`` for ``cfg.iterations`` steps."""
    trainer = Trainer(recon, views, cfg, region_sets, perceptual)
    report = trainer.run(cfg.iterations)
    if heldout:
        report.final_metrics = evaluate(trainer.recon, heldout, cfg.background, perceptual).as_dict()
    return trainer.recon, report
