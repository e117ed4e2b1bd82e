"""JSON run configuration. Every field is optional; unknown keys are rejected."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..losses import LossWeights
from ..train import TrainConfig
from .errors import ConfigError


@dataclass
class CriticConfig:
    kind: str = "scripted"  # scripted | http
    script: str | None = None
    url: str | None = None
    timeout: float = 60.0
    retries: int = 2
    prompt_dir: str | None = None


@dataclass
class EnhancerConfig:
    kind: str = "identity"  # identity | sharpen | external
    command: list[str] = field(default_factory=list)
    timeout: float = 3600.0
    amount: float = 1.0
    sigma: float = 1.0


@dataclass
class HumanConfig:
    n_points: int = 50_000
    sh_degree: int = 0
    feature_dim: int = 64
    plane_resolution: int = 64
    hidden: int = 128


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    enhancer: EnhancerConfig = field(default_factory=EnhancerConfig)
    human: HumanConfig = field(default_factory=HumanConfig)


_SKIP_TRAIN = {"region_set"}


def _check_type(name: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{name}: expected {type(default).__name__}, got {type(value).__name__}")


def _build(cls, doc, prefix: str, skip=frozenset(), nullable=frozenset()):
    if not isinstance(doc, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {prefix or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    default = cls()
    for k, v in doc.items():
        name = f"{prefix}.{k}" if prefix else k
        d = getattr(default, k)
        if v is None and (d is None or k in nullable):
            kwargs[k] = None
            continue
        if d is not None:
            _check_type(name, v, d)
        elif isinstance(v, bool) or not isinstance(v, (int, float, str)):
            raise ConfigError(f"{name}: unsupported value")
        kwargs[k] = v
    return kwargs


def config_from_dict(doc) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be an object")
    unknown = sorted(set(doc) - {"train", "critic", "enhancer", "human"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    try:
        tdoc = dict(doc.get("train", {})) if isinstance(doc.get("train", {}), dict) else doc["train"]
        weights = None
        if isinstance(tdoc, dict) and "weights" in tdoc:
            wk = _build(LossWeights, tdoc.pop("weights"), "train.weights")
            weights = LossWeights(**{k: float(v) for k, v in wk.items()})
        tk = _build(TrainConfig, tdoc, "train", skip=_SKIP_TRAIN | {"weights"},
                    nullable={"spatial_lr_scale", "densify_until"})
        if "background" in tk:
            bg = tk["background"]
            if len(bg) != 3 or any(isinstance(c, bool) or not isinstance(c, (int, float)) for c in bg):
                raise ConfigError("train.background must be three numbers")
            tk["background"] = tuple(float(c) for c in bg)
        for k in ("spatial_lr_scale",):
            if tk.get(k) is not None:
                tk[k] = float(tk[k])
        train = TrainConfig(**tk, **({"weights": weights} if weights else {}))
        critic = CriticConfig(**_build(CriticConfig, doc.get("critic", {}), "critic"))
        if critic.kind not in ("scripted", "http"):
            raise ConfigError("critic.kind must be 'scripted' or 'http'")
        if critic.timeout <= 0 or critic.retries < 0:
            raise ConfigError("critic timeout must be positive and retries non-negative")
        enhancer = EnhancerConfig(**_build(EnhancerConfig, doc.get("enhancer", {}), "enhancer"))
        if enhancer.kind not in ("identity", "sharpen", "external"):
            raise ConfigError("enhancer.kind must be identity, sharpen or external")
        if not all(isinstance(c, str) for c in enhancer.command):
            raise ConfigError("enhancer.command must be a list of strings")
        human = HumanConfig(**_build(HumanConfig, doc.get("human", {}), "human"))
        if human.n_points < 1 or human.sh_degree not in (0, 1, 2, 3):
            raise ConfigError("human.n_points must be >= 1 and sh_degree in 0..3")
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(train, critic, enhancer, human)


def parse_config(data) -> RunConfig:
    if isinstance(data, (bytes, bytearray)):
        try:
            data = bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError("config is not UTF-8", offset=exc.start) from None
    try:
        doc = json.loads(data) if data.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno, offset=exc.pos) from None
    except RecursionError:
        raise ConfigError("JSON nesting too deep") from None
    return config_from_dict(doc)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_bytes())


def config_to_dict(cfg: RunConfig) -> dict:
    t = {f.name: getattr(cfg.train, f.name) for f in dataclasses.fields(TrainConfig) if f.name not in _SKIP_TRAIN}
    t["weights"] = dataclasses.asdict(cfg.train.weights)
    t["background"] = list(cfg.train.background)
    return {"train": t, "critic": dataclasses.asdict(cfg.critic), "enhancer": dataclasses.asdict(cfg.enhancer),
            "human": dataclasses.asdict(cfg.human)}


def dump_config(cfg: RunConfig) -> str:
    """Canonical text: every field with its effective value, keys sorted."""
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)
