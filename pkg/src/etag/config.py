"""Run configuration: nested dataclasses, YAML files and dotted-key overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import DomainError

METHODS = ("eTag", "B0", "B1", "B2", "B3", "Fine", "Joint")


class ConfigError(DomainError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"          # "synthetic" or "idx"
    n_classes: int = 8
    dim: int = 16
    separation: float = 4.0
    samples_per_class: int = 200
    n_tasks: int = 4
    first_fraction: float | None = None  # None: equal split
    stream_seed: int | None = None       # defaults to the run seed
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""


@dataclass
class ModelConfig:
    widths: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    stride: int = 2
    latent_dim: int = 32
    generator_hidden: int = 128


@dataclass
class TrainConfig:
    solver_epochs: int = 60
    generator_epochs: int = 150
    batch_size: int = 64
    solver_lr: float = 1e-3
    generator_lr: float = 1e-3
    lr_decay_at: float = 2 / 3
    lr_decay_factor: float = 0.1


@dataclass
class RunConfig:
    seed: int = 0
    method: str = "eTag"
    tau: float = 3.0
    ss_ce_incremental: bool = False
    squared_l2: bool = False
    replay_support: str = "all"          # softmax support of the replay CE: "all" seen classes or "old"
    accuracy_weighting: str = "sample"   # how A averages tasks: "sample" or "task"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.replay_support not in ("old", "all"):
            raise ConfigError(f"replay_support must be 'old' or 'all', got {self.replay_support!r}")
        if self.accuracy_weighting not in ("sample", "task"):
            raise ConfigError(f"accuracy_weighting must be 'sample' or 'task'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        return _build(cls, raw or {}, "")


def _build(kind, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(kind)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
        sub = _NESTED.get((kind, key))
        kwargs[key] = _build(sub, value, f"{prefix}{key}.") if sub else value
    return kind(**kwargs)


_NESTED = {(RunConfig, "data"): DataConfig, (RunConfig, "model"): ModelConfig,
           (RunConfig, "train"): TrainConfig}


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(value) if value.strip() else None


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Set dotted keys in a nested dict copy; unknown keys are caught by ``from_dict``."""
    out = _deepcopy_dict(raw)
    for text in overrides:
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-mapping")
        node[path[-1]] = value
    return out


def _deepcopy_dict(d):
    return {k: _deepcopy_dict(v) if isinstance(v, dict) else v for k, v in d.items()}


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    return RunConfig.from_dict(apply_overrides(raw, overrides or []))
