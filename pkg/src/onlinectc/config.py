"""Run configuration: a JSON file plus ``key.path=value`` overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .online import InvalidConfigError


@dataclass
class DataPaths:
    train: str = ""
    dev: str = ""
    test: str = ""


@dataclass
class NetworkSection:
    layers: int = 1
    cells: int = 32
    dropout: float = 0.0
    seed: int = 0


@dataclass
class OptimizerSection:
    kind: str = "sgd"
    learning_rate: float = 1e-2
    momentum: float = 0.9
    rms_decay: float = 0.99
    epsilon: float = 1e-6
    max_grad_norm: float | None = None


@dataclass
class AnnealSection:
    enabled: bool = False
    patience: int = 6
    lr_decay_factor: float = 2.0
    lr_floor: float = 1e-6
    start_frames: int = 0


@dataclass
class Seeds:
    order: int = 0
    dropout: int = 0


@dataclass
class RunConfig:
    data: DataPaths = field(default_factory=DataPaths)
    network: NetworkSection = field(default_factory=NetworkSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    anneal: AnnealSection = field(default_factory=AnnealSection)
    seeds: Seeds = field(default_factory=Seeds)
    h: int = 64
    h_prime: int = 32
    n_streams: int = 8
    pretrain_frames: int = 0
    eval_interval: int = 100_000
    max_frames: int = 1_000_000
    max_epochs: int | None = None
    workers: int = 1
    gap: int = 0
    continuous: bool = True
    reset_at_boundaries: bool = False
    dev_streams: int = 4
    out_dir: str = "run"

    def validate(self) -> "RunConfig":
        if self.h_prime < 1 or self.h < self.h_prime:
            raise InvalidConfigError(f"need h >= h' >= 1, got h={self.h}, h'={self.h_prime}")
        if self.n_streams < 1:
            raise InvalidConfigError("n_streams must be at least 1")
        if self.optimizer.kind not in ("sgd", "adadelta"):
            raise InvalidConfigError(f"unknown optimizer {self.optimizer.kind!r}")
        if self.optimizer.learning_rate <= 0:
            raise InvalidConfigError("learning_rate must be positive")
        if self.anneal.enabled and not self.anneal.lr_floor < self.optimizer.learning_rate:
            raise InvalidConfigError("anneal.lr_floor must be below the learning rate")
        if self.eval_interval < 1 or self.max_frames < 0 or self.workers < 1 or self.gap < 0:
            raise InvalidConfigError("eval_interval, max_frames, workers and gap must be sensible")
        return self

    @property
    def total_unroll(self) -> int:
        return self.n_streams * self.h

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _build(cls, values: dict, where: str = ""):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise InvalidConfigError(f"unknown config key {where}{key}")
        default = getattr(cls(), key)
        if is_dataclass(default):
            if not isinstance(value, dict):
                raise InvalidConfigError(f"{where}{key} must be an object")
            value = _build(type(default), value, f"{where}{key}.")
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(values: dict) -> RunConfig:
    try:
        return _build(RunConfig, values).validate()
    except TypeError as exc:
        raise InvalidConfigError(str(exc)) from None


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b=value``; the value is read as JSON, else kept as a string."""
    if "=" not in text:
        raise InvalidConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(values: dict, overrides: list[str]) -> dict:
    values = json.loads(json.dumps(values))
    for text in overrides:
        path, value = parse_override(text)
        node = values
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InvalidConfigError(f"cannot override inside {text!r}")
        node[path[-1]] = value
    return values


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    values: dict = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"{path}: {exc}") from None
    return config_from_dict(apply_overrides(values, list(overrides)))
