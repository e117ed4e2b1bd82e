"""Reconstruction objectives, the region-weighted refinement loss and image metrics.

All norms are mean-normalised so magnitudes do not depend on resolution.
Images are float arrays (H, W, 3) in [0, 1]; masks and alpha maps are (H, W).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_INF = math.inf


@dataclass
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.01
    lambda3: float = 0.01
    omega: float = 5.0
    alpha: float = 0.5
    beta: float = 0.025

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")


@dataclass
class RegionSet:
    """Axis-aligned pixel boxes (x0, y0, x1, y1), half-open; membership is their union."""

    boxes: list[tuple[int, int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.boxes = [tuple(int(v) for v in b) for b in self.boxes]
        for x0, y0, x1, y1 in self.boxes:
            if not (x0 < x1 and y0 < y1):
                raise ValueError(f"degenerate region box {(x0, y0, x1, y1)}")
            if x0 < 0 or y0 < 0:
                raise ValueError(f"region box {(x0, y0, x1, y1)} starts outside the image")

    def __len__(self) -> int:
        return len(self.boxes)

    def validate(self, height: int, width: int) -> None:
        for x0, y0, x1, y1 in self.boxes:
            if x1 > width or y1 > height:
                raise ValueError(f"region box {(x0, y0, x1, y1)} exceeds {width}x{height} image")

    def mask(self, height: int, width: int) -> np.ndarray:
        self.validate(height, width)
        m = np.zeros((height, width), dtype=bool)
        for x0, y0, x1, y1 in self.boxes:
            m[y0:y1, x0:x1] = True
        return m


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _as_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[..., None] if x.ndim == 2 else x


# --------------------------------------------------------------------------
# basic terms


def l1_color_loss(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check_same(pred, target)
    return float(np.mean(np.abs(pred - target)))


def mask_loss(pred_alpha, target_mask, squared: bool = False) -> float:
    """Root-mean-square difference (or the mean square with ``squared``)."""
    pred_alpha, target_mask = np.asarray(pred_alpha, dtype=np.float64), np.asarray(target_mask, dtype=np.float64)
    _check_same(pred_alpha, target_mask)
    mse = float(np.mean((pred_alpha - target_mask) ** 2))
    return mse if squared else math.sqrt(mse)


def psnr(pred, target) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] data; +inf when MSE < 1e-12."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check_same(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse < 1e-12:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


# --------------------------------------------------------------------------
# SSIM


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation over the first two axes of (H, W, C)."""
    y = sliding_window_view(x, len(k), axis=0) @ k
    return sliding_window_view(y, len(k), axis=1) @ k


def _filter_valid_adjoint(y: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = len(k) - 1
    kr = k[::-1]
    y = np.pad(y, ((0, 0), (n, n), (0, 0)))
    y = sliding_window_view(y, len(k), axis=1) @ kr
    y = np.pad(y, ((n, n), (0, 0), (0, 0)))
    return sliding_window_view(y, len(k), axis=0) @ kr


@dataclass
class _SsimParts:
    S: np.ndarray
    mu_a: np.ndarray
    mu_b: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    B1: np.ndarray
    B2: np.ndarray


def _ssim_parts(a: np.ndarray, b: np.ndarray) -> _SsimParts:
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    k = gaussian_window_1d()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    saa = _filter_valid(a * a, k) - mu_a ** 2
    sbb = _filter_valid(b * b, k) - mu_b ** 2
    sab = _filter_valid(a * b, k) - mu_a * mu_b
    A1, A2 = 2 * mu_a * mu_b + c1, 2 * sab + c2
    B1, B2 = mu_a ** 2 + mu_b ** 2 + c1, saa + sbb + c2
    return _SsimParts(A1 * A2 / (B1 * B2), mu_a, mu_b, A1, A2, B1, B2)


def ssim_map(a, b) -> np.ndarray:
    """Local SSIM for every full 11x11 window position: (H-10, W-10, C)."""
    a, b = _as_image(a), _as_image(b)
    _check_same(a, b)
    return _ssim_parts(a, b).S


def ssim(a, b) -> float:
    return float(np.mean(ssim_map(a, b)))


def _ssim_map_backward(a: np.ndarray, b: np.ndarray, p: _SsimParts, g_S: np.ndarray) -> np.ndarray:
    """dL/da given dL/dS for the SSIM map (b is held fixed)."""
    k = gaussian_window_1d()
    denom = p.B1 * p.B2
    g_mu = g_S * (2 * p.mu_b * p.A2 / denom - p.S * 2 * p.mu_a / p.B1)
    g_saa = g_S * (-p.S / p.B2)
    g_sab = g_S * (2 * p.A1 / denom)
    g_mu_total = g_mu - 2 * p.mu_a * g_saa - p.mu_b * g_sab
    return (_filter_valid_adjoint(g_mu_total, k) + 2 * a * _filter_valid_adjoint(g_saa, k)
            + b * _filter_valid_adjoint(g_sab, k))


def ssim_loss(a, b, literal: bool = False) -> float:
    """1 - SSIM, or the raw SSIM value when ``literal`` is set."""
    s = ssim(a, b)
    return s if literal else 1.0 - s


# --------------------------------------------------------------------------
# perceptual slot


class PerceptualBackend(Protocol):
    def loss(self, a: np.ndarray, b: np.ndarray) -> float: ...

    def loss_and_grad(self, a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]: ...

    def pixel_map(self, a: np.ndarray, b: np.ndarray) -> np.ndarray: ...


def _pool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _unpool2(g: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape)
    h, w = g.shape[0] * 2, g.shape[1] * 2
    q = 0.25 * np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)
    out[:h, :w] = q
    return out


class PyramidL2:
    """Stand-in perceptual distance (not LPIPS): mean squared error averaged over an
    average-pooled pyramid. Pooling uses 2x2 blocks, dropping an odd trailing
    row/column, and stops once either side is below 2 pixels.
    """

    def __init__(self, levels: int = 3):
        self.levels = levels

    def _pyramid(self, x: np.ndarray) -> list[np.ndarray]:
        out = [x]
        for _ in range(self.levels - 1):
            cur = out[-1]
            out.append(_pool2(cur) if cur.shape[0] >= 2 and cur.shape[1] >= 2 else cur)
        return out

    def loss(self, a, b) -> float:
        a, b = _as_image(a), _as_image(b)
        _check_same(a, b)
        return float(np.mean([np.mean((pa - pb) ** 2) for pa, pb in zip(self._pyramid(a), self._pyramid(b))]))

    def loss_and_grad(self, a, b) -> tuple[float, np.ndarray]:
        a, b = _as_image(a), _as_image(b)
        _check_same(a, b)
        pa, pb = self._pyramid(a), self._pyramid(b)
        value = float(np.mean([np.mean((x - y) ** 2) for x, y in zip(pa, pb)]))
        grad = np.zeros_like(a)
        for lvl in range(self.levels):
            g = 2.0 * (pa[lvl] - pb[lvl]) / (pa[lvl].size * self.levels)
            for back in range(lvl, 0, -1):
                prev = pa[back - 1]
                g = _unpool2(g, prev.shape) if prev.shape != pa[back].shape else g
            grad += g
        return value, grad

    def pixel_map(self, a, b) -> np.ndarray:
        a, b = _as_image(a), _as_image(b)
        return np.mean((a - b) ** 2, axis=-1)


DEFAULT_PERCEPTUAL = PyramidL2()


def perceptual_loss(a, b, backend: PerceptualBackend | None = DEFAULT_PERCEPTUAL) -> float:
    if backend is None:
        raise RuntimeError("no perceptual backend installed")
    return float(backend.loss(a, b))


# --------------------------------------------------------------------------
# composite objectives


@dataclass
class ReconBreakdown:
    total: float
    l1: float
    mask: float
    ssim: float
    perceptual: float
    region: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


def combine_recon(l1: float, mask: float, ssim_term: float, perceptual: float, w: LossWeights) -> float:
    return l1 + w.lambda1 * mask + w.lambda2 * ssim_term + w.lambda3 * perceptual


def recon_loss(pred, target_img, target_mask, pred_alpha, w: LossWeights,
               perceptual: PerceptualBackend | None = DEFAULT_PERCEPTUAL, ssim_literal: bool = False,
               mask_squared: bool = False) -> ReconBreakdown:
    """L1 + lambda1 * mask + lambda2 * SSIM term + lambda3 * perceptual, with per-term breakdown.

    ``target_mask=None`` drops the mask term.
    """
    l1 = l1_color_loss(pred, target_img)
    m = 0.0 if target_mask is None else mask_loss(pred_alpha, target_mask, squared=mask_squared)
    s = ssim_loss(pred, target_img, literal=ssim_literal)
    p = perceptual_loss(pred, target_img, perceptual) if w.lambda3 > 0 or perceptual is not None else 0.0
    return ReconBreakdown(combine_recon(l1, m, s, p, w), l1, m, s, p)


@dataclass
class PixelLossMaps:
    """Per-pixel integrands used inside flagged regions, each (H, W)."""

    l1: np.ndarray
    mask: np.ndarray
    ssim: np.ndarray
    perceptual: np.ndarray


def pixel_loss_maps(pred, target, target_mask, pred_alpha, perceptual: PerceptualBackend | None = DEFAULT_PERCEPTUAL,
                    ssim_literal: bool = False) -> PixelLossMaps:
    """L1 and perceptual terms average over channels; the mask term is the squared
    alpha error; the SSIM term is the local (1 - SSIM) of the window centred on the
    pixel, zero where no full window fits.
    """
    pred, target = _as_image(pred), _as_image(target)
    H, W = pred.shape[:2]
    l1 = np.mean(np.abs(pred - target), axis=-1)
    mk = np.zeros((H, W)) if target_mask is None else (np.asarray(pred_alpha) - np.asarray(target_mask)) ** 2
    local = ssim_map(pred, target).mean(axis=-1)
    h = SSIM_WINDOW // 2
    sm = np.zeros((H, W))
    sm[h:H - h, h:W - h] = local if ssim_literal else 1.0 - local
    pm = perceptual.pixel_map(pred, target) if perceptual is not None else np.zeros((H, W))
    return PixelLossMaps(l1, mk, sm, pm)


def region_weighted_loss(maps: PixelLossMaps, regions: RegionSet, omega: float, recon: float,
                         w: LossWeights) -> float:
    """L_recon + omega * sum over flagged pixels of the weighted per-pixel terms."""
    if omega < 0:
        raise ValueError("omega must be >= 0")
    if len(regions) == 0 or omega == 0:
        return recon
    H, W = maps.l1.shape
    sel = regions.mask(H, W)
    per_pixel = maps.l1 + w.lambda1 * maps.mask + w.lambda2 * maps.ssim + w.lambda3 * maps.perceptual
    return recon + omega * float(np.sum(per_pixel[sel]))


@dataclass
class ObjectiveResult:
    value: float
    breakdown: ReconBreakdown
    grad_color: np.ndarray
    grad_alpha: np.ndarray


def recon_objective(pred, pred_alpha, target, target_mask, w: LossWeights, regions: RegionSet | None = None,
                    perceptual: PerceptualBackend | None = DEFAULT_PERCEPTUAL, ssim_literal: bool = False,
                    mask_squared: bool = False) -> ObjectiveResult:
    """Value and gradients (w.r.t. rendered colour and alpha) of L_recon, or of the
    region-weighted L_final when ``regions`` is non-empty and omega > 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same(pred, target)
    H, W = pred.shape[:2]
    C = pred.shape[2]
    d = pred - target
    l1 = float(np.mean(np.abs(d)))
    g_col = np.sign(d) / d.size
    g_alpha = np.zeros((H, W))
    m = 0.0
    if target_mask is not None and w.lambda1 > 0:
        dm = np.asarray(pred_alpha, dtype=np.float64) - np.asarray(target_mask, dtype=np.float64)
        mse = float(np.mean(dm ** 2))
        if mask_squared:
            m = mse
            g_alpha += w.lambda1 * 2.0 * dm / dm.size
        else:
            m = math.sqrt(mse)
            if m > 0:
                g_alpha += w.lambda1 * dm / (dm.size * m)
    elif target_mask is not None:
        m = mask_loss(pred_alpha, target_mask, squared=mask_squared)
    parts = _ssim_parts(pred, target)
    s_mean = float(np.mean(parts.S))
    s_term = s_mean if ssim_literal else 1.0 - s_mean
    sign = 1.0 if ssim_literal else -1.0
    g_S = np.full(parts.S.shape, sign * w.lambda2 / parts.S.size)
    p = 0.0
    if perceptual is not None:
        p, g_p = perceptual.loss_and_grad(pred, target)
        g_col += w.lambda3 * g_p
    recon = combine_recon(l1, m, s_term, p, w)
    region_value = 0.0
    if regions is not None and len(regions) and w.omega > 0:
        sel = regions.mask(H, W)
        om = w.omega
        l1_map = np.mean(np.abs(d), axis=-1)
        region_value += float(np.sum(l1_map[sel]))
        g_col += om * sel[..., None] * np.sign(d) / C
        if target_mask is not None:
            dm = np.asarray(pred_alpha, dtype=np.float64) - np.asarray(target_mask, dtype=np.float64)
            region_value += w.lambda1 * float(np.sum(dm[sel] ** 2))
            g_alpha += om * w.lambda1 * sel * 2.0 * dm
        h = SSIM_WINDOW // 2
        sel_s = sel[h:H - h, h:W - h]
        local = parts.S.mean(axis=-1)
        region_value += w.lambda2 * float(np.sum((local if ssim_literal else 1.0 - local)[sel_s]))
        g_S = g_S + sign * om * w.lambda2 * sel_s[..., None] / C
        if perceptual is not None:
            pm = perceptual.pixel_map(pred, target)
            region_value += w.lambda3 * float(np.sum(pm[sel]))
            g_col += om * w.lambda3 * sel[..., None] * 2.0 * d / C
        region_value *= om
    g_col += _ssim_map_backward(pred, target, parts, g_S)
    total = recon + region_value
    return ObjectiveResult(total, ReconBreakdown(total, l1, m, s_term, p, region_value), g_col, g_alpha)


# --------------------------------------------------------------------------
# sequence losses


def frame_diff_loss(pred_seq: Sequence[np.ndarray], target_seq: Sequence[np.ndarray]) -> float:
    """Mean absolute residual between predicted and target consecutive-frame differences."""
    pred = np.asarray(pred_seq, dtype=np.float64)
    target = np.asarray(target_seq, dtype=np.float64)
    _check_same(pred, target)
    if pred.shape[0] < 2:
        raise ValueError("frame difference loss needs at least two frames")
    return float(np.mean(np.abs(np.diff(pred, axis=0) - np.diff(target, axis=0))))


def combine_total(l1: float, perceptual: float, diff: float, gan: float, w: LossWeights) -> float:
    return l1 + perceptual + w.alpha * diff + w.beta * gan


def total_harmonizer_loss(pred_seq, target_seq, gan_term: float, w: LossWeights,
                          perceptual: PerceptualBackend | None = DEFAULT_PERCEPTUAL) -> float:
    """L1 + perceptual + alpha * L_diff + beta * GAN; the GAN value is supplied by the caller."""
    pred = np.asarray(pred_seq, dtype=np.float64)
    target = np.asarray(target_seq, dtype=np.float64)
    _check_same(pred, target)
    l1 = float(np.mean(np.abs(pred - target)))
    p = float(np.mean([perceptual_loss(a, b, perceptual) for a, b in zip(pred, target)])) if perceptual else 0.0
    diff = frame_diff_loss(pred, target) if len(pred) >= 2 else 0.0
    gan = gan_term if w.beta > 0 else 0.0
    return combine_total(l1, p, diff, gan, w)
