"""Experiment configuration: one JSON file binding world, grid, fusion,
training and evaluation settings, content-hashed so every derived
artifact can be checked against the config that produced it."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .evalharness import EvalConfig
from .fusion import FusionConfig
from .trainer import TrainConfig
from .world import GridConfig, WorldConfig


class ConfigError(ValueError):
    """Malformed experiment config or artifact/config hash mismatch."""


@dataclass
class ExperimentConfig:
    seed: int = 1234
    world: WorldConfig = field(default_factory=WorldConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.train.fusion = self.fusion

    def content_hash(self) -> str:
        return hashlib.sha256(
            canonical_json(to_dict(self)).encode()).hexdigest()[:16]


def to_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["train"].pop("fusion")  # lives under the top-level fusion section
    return d


def canonical_json(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


_SECTIONS = {"world": WorldConfig, "grid": GridConfig, "fusion": FusionConfig,
             "train": TrainConfig, "eval": EvalConfig}


def _build(cls, data: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    coerced = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            v = data[f.name]
            coerced[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**coerced)


def from_dict(data: dict) -> ExperimentConfig:
    unknown = set(data) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {"seed": int(data.get("seed", 1234))}
    for section, cls in _SECTIONS.items():
        kwargs[section] = _build(cls, data.get(section, {}), section)
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        return from_dict(data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def save_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as f:
        json.dump(to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
