"""Triplane feature encoder and small ReLU MLP decoders with manual backprop."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussians import sh_coeff_count

FEATURE_DIM = 64
PLANE_RES = 64
HIDDEN = 128

# (axis_u, axis_v) sampled by each plane: xy, xz, yz
PLANE_AXES = ((0, 1), (0, 2), (1, 2))


@dataclass
class TriplaneEncoder:
    planes: np.ndarray  # (3, h, w, d)
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=np.float64)
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if self.planes.ndim != 4 or self.planes.shape[0] != 3:
            raise ValueError("planes must have shape (3, h, w, d)")
        if self.planes.shape[1] < 2 or self.planes.shape[2] < 2:
            raise ValueError("triplane resolution must be at least 2x2")
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValueError("degenerate triplane bounding box")

    @classmethod
    def create(cls, bbox_min, bbox_max, resolution: int = PLANE_RES, dim: int = FEATURE_DIM,
               seed: int = 0, std: float = 0.1) -> "TriplaneEncoder":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, std, size=(3, resolution, resolution, dim)), bbox_min, bbox_max)

    @property
    def dim(self) -> int:
        return self.planes.shape[3]


@dataclass
class TriplaneTape:
    rows: np.ndarray  # (3, N, 2) integer row indices (lower, upper)
    cols: np.ndarray  # (3, N, 2)
    weights: np.ndarray  # (3, N, 4) bilinear weights for (r0c0, r0c1, r1c0, r1c1)
    frac: np.ndarray  # (3, N, 2) fractional (fu, fv)
    inside: np.ndarray  # (N, 3) True where the coordinate was not clamped


def _plane_coords(enc: TriplaneEncoder, x: np.ndarray):
    h, w = enc.planes.shape[1:3]
    unit = np.clip((x - enc.bbox_min) / (enc.bbox_max - enc.bbox_min), 0.0, 1.0)
    raw = (x - enc.bbox_min) / (enc.bbox_max - enc.bbox_min)
    inside = (raw > 0.0) & (raw < 1.0)
    rows, cols, weights, frac = [], [], [], []
    for au, av in PLANE_AXES:
        u = unit[:, au] * (w - 1)
        v = unit[:, av] * (h - 1)
        c0 = np.minimum(np.floor(u).astype(np.int64), w - 2)
        r0 = np.minimum(np.floor(v).astype(np.int64), h - 2)
        fu = u - c0
        fv = v - r0
        rows.append(np.stack([r0, r0 + 1], 1))
        cols.append(np.stack([c0, c0 + 1], 1))
        weights.append(np.stack([(1 - fv) * (1 - fu), (1 - fv) * fu, fv * (1 - fu), fv * fu], 1))
        frac.append(np.stack([fu, fv], 1))
    return TriplaneTape(np.stack(rows), np.stack(cols), np.stack(weights), np.stack(frac), inside)


def triplane_query(enc: TriplaneEncoder, x, return_tape: bool = False):
    """Feature f^c = sum of bilinear samples on the xy, xz and yz planes.

    Accepts one point (3,) or a batch (N, 3); points outside the box are clamped.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(-1, 3)
    tape = _plane_coords(enc, x)
    f = np.zeros((x.shape[0], enc.dim))
    for p in range(3):
        r, c, wt = tape.rows[p], tape.cols[p], tape.weights[p]
        plane = enc.planes[p]
        f += (wt[:, 0, None] * plane[r[:, 0], c[:, 0]] + wt[:, 1, None] * plane[r[:, 0], c[:, 1]]
              + wt[:, 2, None] * plane[r[:, 1], c[:, 0]] + wt[:, 3, None] * plane[r[:, 1], c[:, 1]])
    out = f[0] if single else f
    return (out, tape) if return_tape else out


def triplane_position_grad(enc: TriplaneEncoder, tape: TriplaneTape, grad_f: np.ndarray) -> np.ndarray:
    """dL/dx of the query positions; zero along clamped axes."""
    h, w = enc.planes.shape[1:3]
    grad_f = np.asarray(grad_f).reshape(-1, enc.dim)
    extent = enc.bbox_max - enc.bbox_min
    g = np.zeros((grad_f.shape[0], 3))
    for p, (au, av) in enumerate(PLANE_AXES):
        r, c = tape.rows[p], tape.cols[p]
        fu, fv = tape.frac[p][:, 0:1], tape.frac[p][:, 1:2]
        plane = enc.planes[p]
        p00, p01 = plane[r[:, 0], c[:, 0]], plane[r[:, 0], c[:, 1]]
        p10, p11 = plane[r[:, 1], c[:, 0]], plane[r[:, 1], c[:, 1]]
        df_du = (1 - fv) * (p01 - p00) + fv * (p11 - p10)
        df_dv = (1 - fu) * (p10 - p00) + fu * (p11 - p01)
        g[:, au] += np.sum(df_du * grad_f, axis=1) * (w - 1) / extent[au]
        g[:, av] += np.sum(df_dv * grad_f, axis=1) * (h - 1) / extent[av]
    return g * tape.inside


def triplane_backward(enc: TriplaneEncoder, tape: TriplaneTape, grad_f: np.ndarray) -> np.ndarray:
    """Scatter dL/df^c back onto the plane grids."""
    g = np.zeros_like(enc.planes)
    grad_f = np.asarray(grad_f).reshape(-1, enc.dim)
    corners = ((0, 0), (0, 1), (1, 0), (1, 1))
    for p in range(3):
        for k, (i, j) in enumerate(corners):
            np.add.at(g[p], (tape.rows[p][:, i], tape.cols[p][:, j]), tape.weights[p][:, k, None] * grad_f)
    return g


# --------------------------------------------------------------------------
# MLP


@dataclass
class MlpDecoder:
    weights: list[np.ndarray]  # each (in, out)
    biases: list[np.ndarray]

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise ValueError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: weight/bias shapes disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input width does not chain from layer {i - 1}")

    @classmethod
    def create(cls, in_dim: int, hidden: tuple[int, ...], out_dim: int, seed: int = 0,
               zero_last: bool = True) -> "MlpDecoder":
        """He-uniform hidden layers; the output layer starts at zero by default."""
        rng = np.random.default_rng(seed)
        dims = (in_dim, *hidden, out_dim)
        ws, bs = [], []
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            if last and zero_last:
                w = np.zeros((dims[i], dims[i + 1]))
            else:
                bound = np.sqrt(6.0 / dims[i])
                w = rng.uniform(-bound, bound, size=(dims[i], dims[i + 1]))
            ws.append(w)
            bs.append(np.zeros(dims[i + 1]))
        return cls(ws, bs)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_parameters(self, params: list[np.ndarray]) -> None:
        self.weights = [params[2 * i] for i in range(len(self.weights))]
        self.biases = [params[2 * i + 1] for i in range(len(self.biases))]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "MlpDecoder":
        return MlpDecoder([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class MlpCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activation of each layer


def mlp_forward(dec: MlpDecoder, x, cache: bool = False):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x.reshape(-1, x.shape[-1])
    if h.shape[1] != dec.in_dim:
        raise ValueError(f"decoder expects {dec.in_dim} inputs, got {h.shape[1]}")
    tape = MlpCache()
    n = len(dec.weights)
    for i, (w, b) in enumerate(zip(dec.weights, dec.biases)):
        tape.inputs.append(h)
        z = h @ w + b
        tape.pre.append(z)
        h = np.maximum(z, 0.0) if i < n - 1 else z
    out = h[0] if single else h
    return (out, tape) if cache else out


def mlp_backward(dec: MlpDecoder, tape: MlpCache, upstream) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse-mode pass. Returns ([dW0, db0, dW1, db1, ...], dL/dx)."""
    if not tape.inputs:
        raise ValueError("mlp_backward needs a cache from mlp_forward(..., cache=True)")
    g = np.asarray(upstream, dtype=np.float64).reshape(tape.pre[-1].shape)
    grads: list[np.ndarray] = [None] * (2 * len(dec.weights))
    for i in range(len(dec.weights) - 1, -1, -1):
        if i < len(dec.weights) - 1:
            g = g * (tape.pre[i] > 0)
        grads[2 * i] = tape.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ dec.weights[i].T
    return grads, g


# --------------------------------------------------------------------------
# the three human decoders


def nonrigid_decode(dec: MlpDecoder, f):
    """(dx, ds, dq) offsets, each (..., 3)."""
    if dec.out_dim != 9:
        raise ValueError(f"non-rigid decoder must output 9 values, has {dec.out_dim}")
    y = mlp_forward(dec, f)
    return y[..., 0:3], y[..., 3:6], y[..., 6:9]


def color_decode(dec: MlpDecoder, f, sh_degree: int = 0):
    """(opacity_logit, sh) where sh has shape (..., K, 3)."""
    k = sh_coeff_count(sh_degree)
    if dec.out_dim != 1 + 3 * k:
        raise ValueError(f"colour decoder must output {1 + 3 * k} values, has {dec.out_dim}")
    y = mlp_forward(dec, f)
    return y[..., 0], y[..., 1:].reshape(y.shape[:-1] + (k, 3))


@dataclass
class Decoders:
    """Triplane encoder plus non-rigid, skinning-offset and colour decoders."""

    triplane: TriplaneEncoder
    nonrigid: MlpDecoder
    lbs_offset: MlpDecoder
    color: MlpDecoder

    @classmethod
    def create(cls, bbox_min, bbox_max, n_joints: int, sh_degree: int = 0, feature_dim: int = FEATURE_DIM,
               resolution: int = PLANE_RES, hidden: int = HIDDEN, seed: int = 0) -> "Decoders":
        return cls(
            TriplaneEncoder.create(bbox_min, bbox_max, resolution, feature_dim, seed=seed),
            MlpDecoder.create(feature_dim, (hidden,) * 3, 9, seed=seed + 1),
            MlpDecoder.create(feature_dim, (hidden,) * 3, n_joints, seed=seed + 2),
            MlpDecoder.create(feature_dim, (hidden,), 1 + 3 * sh_coeff_count(sh_degree), seed=seed + 3),
        )

    @property
    def sh_degree(self) -> int:
        k = (self.color.out_dim - 1) // 3
        return int(round(np.sqrt(k))) - 1

    def copy(self) -> "Decoders":
        return Decoders(
            TriplaneEncoder(self.triplane.planes.copy(), self.triplane.bbox_min.copy(), self.triplane.bbox_max.copy()),
            self.nonrigid.copy(), self.lbs_offset.copy(), self.color.copy(),
        )

    def mlps(self) -> dict[str, MlpDecoder]:
        return {"nonrigid": self.nonrigid, "lbs_offset": self.lbs_offset, "color": self.color}
