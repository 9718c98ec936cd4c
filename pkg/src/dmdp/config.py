"""JSON experiment configuration with dotted-path overrides."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .encoder import EncoderConfig
from .errors import ConfigurationError, DMDPError, ValidationError
from .prompts import PromptConfig, Variant
from .training import TrainConfig


class UsageError(DMDPError):
    pass


@dataclass(frozen=True)
class DataConfig:
    case: int = 1
    n: int = 2048
    seed: int = 0
    manifest: str | None = None
    valid_manifest: str | None = None
    test_manifest: str | None = None
    vocab: str | None = None
    targets: dict = field(default_factory=dict)
    policy: str = "k-shot"
    k: int = 20
    percent: float = 0.01
    split_seeds: tuple = (0,)


@dataclass(frozen=True)
class PretrainConfig:
    backbone: str | None = None
    random_backbone: bool = False
    pairs: int = 1024
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 16
    seed: int = 0


@dataclass(frozen=True)
class AnalysisConfig:
    seeds: tuple = (0, 1, 2)
    depths: tuple = ()
    lengths: tuple = (1, 2, 4, 8)
    workers: int = 1
    attn_samples: int = 4
    per_head: bool = False


SECTIONS = {
    "encoder": EncoderConfig,
    "prompt": PromptConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "pretrain": PretrainConfig,
    "analysis": AnalysisConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        for name in SECTIONS:
            sec = asdict(getattr(self, name))
            for k, v in sec.items():
                if isinstance(v, Variant):
                    sec[k] = v.value
                elif isinstance(v, tuple):
                    sec[k] = list(v)
            out[name] = sec
        out["output_dir"] = self.output_dir
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def valid_keys() -> list[str]:
    keys = ["output_dir"]
    for name, cls in SECTIONS.items():
        keys.extend(f"{name}.{f.name}" for f in fields(cls))
    return keys


def _coerce(section: str, cls, raw: dict):
    known = {f.name: f for f in fields(cls)}
    for k in raw:
        if k not in known:
            raise UsageError(f"unknown config key {section}.{k}; valid keys: {', '.join(valid_keys())}")
    kwargs = {}
    for k, v in raw.items():
        default = getattr(cls(), k)
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        elif isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ValidationError(f"{section}: {exc}") from None


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    for k in raw:
        if k not in SECTIONS and k != "output_dir":
            raise UsageError(f"unknown config key {k}; valid keys: {', '.join(valid_keys())}")
    parts = {name: _coerce(name, cls, raw.get(name, {}) or {}) for name, cls in SECTIONS.items()}
    return ExperimentConfig(**parts, output_dir=str(raw.get("output_dir", "runs/default")))


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = json.loads(json.dumps(raw))
    allowed = set(valid_keys())
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in allowed:
            raise UsageError(f"unknown config key {key}; valid keys: {', '.join(valid_keys())}")
        if key == "output_dir":
            raw["output_dir"] = value
            continue
        section, _, name = key.partition(".")
        raw.setdefault(section, {})[name] = parse_value(value)
    return raw


def resolve(raw: dict, overrides: list[str] = (), env: dict | None = None) -> ExperimentConfig:
    """Parse, override, apply ``DMDP_SEED``, cap prompt depth at L, and validate."""
    env = os.environ if env is None else env
    cfg = from_dict(apply_overrides(raw, list(overrides)))
    if env.get("DMDP_SEED") not in (None, ""):
        try:
            seed = int(env["DMDP_SEED"])
        except ValueError:
            raise ValidationError(f"DMDP_SEED must be an integer, got {env['DMDP_SEED']!r}") from None
        cfg = replace(cfg, train=replace(cfg.train, seed=seed))
    cfg = replace(cfg, prompt=cfg.prompt.capped(cfg.encoder.L))
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    try:
        cfg.encoder.validate()
        cfg.prompt.validate(cfg.encoder)
        cfg.train.validate()
    except ConfigurationError as exc:
        raise ValidationError(str(exc)) from None
    d = cfg.data
    if d.case not in (0, 1, 2, 3):
        raise ValidationError(f"data.case must be 0..3, got {d.case}")
    if d.n < 4:
        raise ValidationError("data.n must be >= 4")
    if d.policy not in ("k-shot", "percent"):
        raise ValidationError(f"data.policy must be 'k-shot' or 'percent', got {d.policy!r}")
    if not d.split_seeds:
        raise ValidationError("data.split_seeds must list at least one seed")
    paths = [("data.manifest", d.manifest), ("data.valid_manifest", d.valid_manifest),
             ("data.test_manifest", d.test_manifest), ("data.vocab", d.vocab),
             ("pretrain.backbone", cfg.pretrain.backbone)]
    paths += [(f"data.targets.{k}", v) for k, v in d.targets.items()]
    for key, p in paths:
        if p is not None and not Path(p).exists():
            raise ValidationError(f"{key}: path {p!r} does not exist")
    if cfg.pretrain.batch_size < 2:
        raise ValidationError("pretrain.batch_size must be >= 2")
    if not cfg.analysis.seeds:
        raise ValidationError("analysis.seeds must list at least one seed")
    for s in cfg.analysis.depths:
        if not 1 <= s <= cfg.encoder.L:
            raise ValidationError(f"analysis.depths entry {s} outside [1, {cfg.encoder.L}]")
    for c in cfg.analysis.lengths:
        if c < 1 or c > cfg.encoder.pos_reserve:
            raise ValidationError(f"analysis.lengths entry {c} outside [1, {cfg.encoder.pos_reserve}]")


def load(path: str | Path | None, overrides: list[str] = (), env: dict | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ValidationError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path}: {exc}") from None
    return resolve(raw, overrides, env)
