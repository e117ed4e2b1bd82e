"""Critic-driven refinement: region feedback, frame filtering and the multi-round loop."""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .losses import RegionSet
from .reconstruction import Reconstruction
from .render import render
from .train import TrainConfig, Trainer, View

log = logging.getLogger(__name__)

ROLES = ("filter", "localize")


class Label(str, enum.Enum):
    WELL_RECONSTRUCTED = "well_reconstructed"
    BLURRY = "blurry"
    BODY_INTERSECTION = "body_intersection"
    GROUND_FUSION = "ground_fusion"
    OTHER = "other"


class CriticProtocolError(ValueError):
    """The critic answered with a document that violates the response schema."""


class CriticTransportError(RuntimeError):
    """The critic could not be reached (after retries)."""


class EmptyTrainingSetError(ValueError):
    pass


@dataclass(frozen=True)
class CritiqueRegion:
    box: tuple[int, int, int, int]
    label: Label
    note: str = ""

    @property
    def negative(self) -> bool:
        return self.label != Label.WELL_RECONSTRUCTED


@dataclass
class CritiqueReport:
    view_id: int
    regions: list[CritiqueRegion]
    round: int = 1

    def __post_init__(self):
        if self.round < 1:
            raise ValueError("critique rounds start at 1")

    @property
    def negative_regions(self) -> list[CritiqueRegion]:
        return [r for r in self.regions if r.negative]

    @property
    def all_good(self) -> bool:
        return not self.negative_regions


@dataclass
class FilterVerdict:
    view_id: int
    keep: bool
    note: str = ""


# --------------------------------------------------------------------------
# response parsing


def _as_int_box(box, width: int, height: int) -> tuple[int, int, int, int] | None:
    if not isinstance(box, list) or len(box) != 4:
        raise CriticProtocolError("box must be a list [x0, y0, x1, y1]")
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) for v in box):
        raise CriticProtocolError("box coordinates must be finite numbers")
    x0, y0, x1, y1 = box
    x0 = min(max(math.floor(x0), 0), width)
    y0 = min(max(math.floor(y0), 0), height)
    x1 = min(max(math.ceil(x1), 0), width)
    y1 = min(max(math.ceil(y1), 0), height)
    if x0 >= x1 or y0 >= y1:
        return None
    return (x0, y0, x1, y1)


def parse_localize_response(doc, width: int, height: int) -> list[CritiqueRegion]:
    """Validate a ``{"regions": [...]}`` document, clipping boxes to the image.

    An empty region list means the whole frame is well reconstructed. Boxes that
    clip to nothing are dropped.
    """
    if not isinstance(doc, dict) or not isinstance(doc.get("regions"), list):
        raise CriticProtocolError("localize response must be an object with a 'regions' list")
    out = []
    for i, item in enumerate(doc["regions"]):
        if not isinstance(item, dict):
            raise CriticProtocolError(f"region {i} must be an object")
        try:
            label = Label(item.get("label"))
        except ValueError:
            raise CriticProtocolError(f"region {i} has unknown label {item.get('label')!r}") from None
        note = item.get("note", "")
        if not isinstance(note, str):
            raise CriticProtocolError(f"region {i} note must be a string")
        box = _as_int_box(item.get("box"), width, height)
        if box is None:
            log.warning("event=critic_box_dropped index=%d reason=empty_after_clipping", i)
            continue
        out.append(CritiqueRegion(box, label, note))
    if not doc["regions"]:
        out = [CritiqueRegion((0, 0, width, height), Label.WELL_RECONSTRUCTED, "")]
    return out


def parse_filter_response(doc) -> tuple[bool, str]:
    if not isinstance(doc, dict) or doc.get("verdict") not in ("keep", "discard"):
        raise CriticProtocolError("filter response must be an object with verdict 'keep' or 'discard'")
    note = doc.get("note", "")
    if not isinstance(note, str):
        raise CriticProtocolError("filter note must be a string")
    return doc["verdict"] == "keep", note


# --------------------------------------------------------------------------
# critics


class Critic(Protocol):
    def query(self, image: np.ndarray, role: str, round: int, view_id: int) -> dict: ...


def load_prompt(role: str, prompt_dir=None) -> str:
    """Prompt template for a role; ``prompt_dir`` overrides the shipped placeholders."""
    if role not in ROLES:
        raise ValueError(f"unknown prompt role {role!r}")
    if prompt_dir is not None:
        return (Path(prompt_dir) / f"{role}.txt").read_text()
    return resources.files("humangs").joinpath("prompts", f"{role}.txt").read_text()


class ScriptedCritic:
    """Deterministic critic read from a script.

    Each non-blank, non-``#`` line is ``<role> <round|*> <view|*> <json>``. The most
    specific match wins (exact round and view, then round only, then view only,
    then both wildcards). Without a match localize answers ``{"regions": []}`` and
    filter answers ``{"verdict": "keep"}``.
    """

    def __init__(self, script: str):
        self.entries: dict[tuple[str, str, str], dict] = {}
        self.calls: list[tuple[str, int, int]] = []
        for lineno, raw in enumerate(script.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(None, 3)
            if len(parts) != 4:
                raise CriticProtocolError(f"script line {lineno}: expected '<role> <round> <view> <json>'")
            role, rnd, view, body = parts
            if role not in ROLES:
                raise CriticProtocolError(f"script line {lineno}: unknown role {role!r}")
            for tok in (rnd, view):
                if tok != "*" and not tok.isdigit():
                    raise CriticProtocolError(f"script line {lineno}: round/view must be an integer or '*'")
            try:
                doc = json.loads(body)
            except json.JSONDecodeError as exc:
                raise CriticProtocolError(f"script line {lineno}: bad JSON ({exc.msg})") from None
            key = (role, rnd if rnd == "*" else str(int(rnd)), view if view == "*" else str(int(view)))
            self.entries[key] = doc

    @classmethod
    def from_file(cls, path) -> "ScriptedCritic":
        return cls(Path(path).read_text())

    def query(self, image, role: str, round: int, view_id: int) -> dict:
        self.calls.append((role, round, view_id))
        r, v = str(round), str(view_id)
        for key in ((role, r, v), (role, r, "*"), (role, "*", v), (role, "*", "*")):
            if key in self.entries:
                return self.entries[key]
        return {"regions": []} if role == "localize" else {"verdict": "keep"}


class HttpCritic:
    """Remote critic: multipart POST with the PNG image and text parts for the
    role and prompt; the reply body is the JSON response document."""

    def __init__(self, url: str, timeout: float = 60.0, retries: int = 2, prompt_dir=None, session=None):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.prompts = {r: load_prompt(r, prompt_dir) for r in ROLES}
        self.session = session

    def query(self, image, role: str, round: int, view_id: int) -> dict:
        import requests

        from .io.images import encode_png

        files = {"image": (f"view_{view_id:05d}.png", encode_png(image), "image/png")}
        data = {"role": role, "prompt": self.prompts[role], "round": str(round), "view": str(view_id)}
        post = self.session.post if self.session is not None else requests.post
        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = post(self.url, files=files, data=data, timeout=self.timeout)
                resp.raise_for_status()
            except requests.RequestException as exc:
                last = exc
                log.warning("event=critic_retry attempt=%d error=%s", attempt + 1, type(exc).__name__)
                continue
            try:
                return resp.json()
            except ValueError:
                raise CriticProtocolError("critic response is not JSON") from None
        raise CriticTransportError(f"critic unreachable after {self.retries + 1} attempts: {last}")


# --------------------------------------------------------------------------
# operations


def critique_views(critic: Critic, images: Sequence[np.ndarray], prompt_role: str = "localize",
                   round: int = 1) -> list:
    """One CritiqueReport per image (localize) or one FilterVerdict per image (filter)."""
    if prompt_role not in ROLES:
        raise ValueError(f"unknown prompt role {prompt_role!r}")
    if len(images) == 0:
        raise ValueError("critique needs at least one image")
    out = []
    for i, img in enumerate(images):
        doc = critic.query(img, prompt_role, round, i)
        if prompt_role == "localize":
            h, w = np.shape(img)[:2]
            out.append(CritiqueReport(i, parse_localize_response(doc, w, h), round))
        else:
            keep, note = parse_filter_response(doc)
            out.append(FilterVerdict(i, keep, note))
    return out


def merge_regions(reports: Sequence[CritiqueReport]) -> RegionSet:
    """Union of every negatively labelled box; overlapping boxes are kept as-is."""
    return RegionSet([r.box for rep in reports for r in rep.negative_regions])


def regions_by_view(reports: Sequence[CritiqueReport]) -> dict[int, RegionSet]:
    out: dict[int, list] = {}
    for rep in reports:
        out.setdefault(rep.view_id, []).extend(r.box for r in rep.negative_regions)
    return {k: RegionSet(v) for k, v in out.items() if v}


def filter_frames(critic: Critic, frames: Sequence[tuple[np.ndarray, np.ndarray]]) -> list[int]:
    """Indices of frames the critic keeps, in order. Each frame is (image, pose
    overlay); the two are shown side by side."""
    if len(frames) == 0:
        raise ValueError("no frames to filter")
    images = []
    for img, overlay in frames:
        img, overlay = np.asarray(img), np.asarray(overlay)
        images.append(np.concatenate([img, overlay], axis=1) if overlay.shape == img.shape else img)
    verdicts = critique_views(critic, images, "filter")
    kept = [v.view_id for v in verdicts if v.keep]
    if not kept:
        raise EmptyTrainingSetError("the critic discarded every frame")
    return kept


@dataclass
class ReflectResult:
    recon: Reconstruction
    rounds: list[list[CritiqueReport]]
    selected_round: int
    negative_counts: list[int]
    degraded: bool = False
    error: str | None = None
    checkpoints: list[Reconstruction] = field(default_factory=list)

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)


def render_views(recon: Reconstruction, views: Sequence[View], background=(0.0, 0.0, 0.0)) -> list[np.ndarray]:
    return [render(recon.compose(v.pose), v.camera, background, keep_cache=False).color for v in views]


def reflect_loop(recon: Reconstruction, views: Sequence[View], critic: Critic, cfg: TrainConfig,
                 round_iterations: int | None = None) -> ReflectResult:
    """Render, critique, retrain with flagged regions weighted; repeat.

    Stops early when every label is well_reconstructed. After the round cap the
    round with the fewest negative regions is returned (earliest on ties). A
    transport failure ends the loop and returns the best round seen so far.
    """
    cfg.validate()
    budget = cfg.critique_round_iterations if round_iterations is None else round_iterations
    if budget < 1:
        raise ValueError("per-round retraining budget must be >= 1")
    current = recon.copy()
    rounds: list[list[CritiqueReport]] = []
    counts: list[int] = []
    checkpoints: list[Reconstruction] = []
    cumulative: dict[int, list] = {}

    def best(degraded=False, error=None):
        if not checkpoints:
            return ReflectResult(recon.copy(), rounds, 0, counts, degraded, error, checkpoints)
        i = int(np.argmin(counts))
        return ReflectResult(checkpoints[i], rounds, i + 1, counts, degraded, error, checkpoints)

    for i in range(1, cfg.critique_max_rounds + 1):
        images = render_views(current, views, cfg.background)
        try:
            reports = critique_views(critic, images, "localize", round=i)
        except CriticTransportError as exc:
            log.warning("event=reflect_degraded round=%d error=%s", i, exc)
            return best(True, str(exc))
        rounds.append(reports)
        checkpoints.append(current)
        n_neg = sum(len(r.negative_regions) for r in reports)
        counts.append(n_neg)
        log.info("event=reflect_round round=%d negative_regions=%d", i, n_neg)
        if n_neg == 0:
            return ReflectResult(current, rounds, i, counts, False, None, checkpoints)
        if i == cfg.critique_max_rounds:
            break
        latest = regions_by_view(reports)
        if cfg.critique_cumulative_regions:
            for k, rs in latest.items():
                cumulative.setdefault(k, []).extend(rs.boxes)
            region_sets = {k: RegionSet(v) for k, v in cumulative.items()}
        else:
            region_sets = latest
        round_cfg = replace(cfg, iterations=budget, seed=cfg.seed + i)
        trainer = Trainer(current, list(views), round_cfg, region_sets=region_sets)
        trainer.run(budget)
        current = trainer.recon
    return best()
