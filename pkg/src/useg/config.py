"""Experiment configuration: JSON document -> validated dataclasses."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .phantom import PhantomConfig, PhantomError
from .segnet import ModelError, SegModelConfig
from .trainer import TrainConfig, TrainError
from .uncertainty import PerturbationError, PoolConfig


class ConfigError(Exception):
    """Invalid experiment config; message names the offending field."""


@dataclass(frozen=True)
class Scenario:
    teacher_organs: int      # K
    new_organ: int           # organ id to add incrementally

    def __post_init__(self):
        if self.teacher_organs < 1:
            raise ConfigError("scenario.teacher_organs must be >= 1")
        if self.new_organ <= self.teacher_organs:
            raise ConfigError("scenario.new_organ must be an organ beyond the teacher's K")


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomConfig
    train: TrainConfig
    scenario: Scenario
    pool: PoolConfig
    model: SegModelConfig | None  # output classes derived per phase when None
    num_samples: int
    out_dir: str
    seed: int

    def __post_init__(self):
        if self.num_samples < 5:
            raise ConfigError("num_samples must be >= 5 for a 4:1 split")
        if self.scenario.new_organ > self.phantom.num_organs:
            raise ConfigError("scenario.new_organ exceeds phantom.num_organs")


def _build(cls, payload: dict, prefix: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{prefix}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in payload:
        if key not in names:
            raise ConfigError(f"{prefix}.{key}: unknown field")
    fixed = {k: tuple(v) if isinstance(v, list) else v for k, v in payload.items()}
    try:
        return cls(**fixed)
    except (TypeError, PhantomError, TrainError, PerturbationError, ModelError,
            ConfigError) as e:
        raise ConfigError(f"{prefix}: {e}") from e


_REQUIRED = ("scenario", "out_dir", "seed")


def parse_experiment(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    for key in _REQUIRED:
        if key not in doc:
            raise ConfigError(f"missing required field {key!r}")
    known = {"phantom", "train", "scenario", "pool", "model",
             "num_samples", "out_dir", "seed"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{key}: unknown field")
    seed = doc["seed"]
    if not isinstance(seed, int):
        raise ConfigError("seed: must be an integer (wall-clock seeding is not allowed)")

    phantom_doc = dict(doc.get("phantom", {}))
    phantom_doc.setdefault("seed", seed)
    train_doc = dict(doc.get("train", {}))
    train_doc.setdefault("seed", seed)
    model = None
    if "model" in doc:
        model = _build(SegModelConfig, doc["model"], "model")
    return ExperimentConfig(
        phantom=_build(PhantomConfig, phantom_doc, "phantom"),
        train=_build(TrainConfig, train_doc, "train"),
        scenario=_build(Scenario, doc["scenario"], "scenario"),
        pool=_build(PoolConfig, doc.get("pool", {}), "pool"),
        model=model,
        num_samples=doc.get("num_samples", 100),
        out_dir=str(doc["out_dir"]),
        seed=seed,
    )


def load_experiment(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if overrides:
        doc = {**doc, **{k: v for k, v in overrides.items() if v is not None}}
    return parse_experiment(doc)
