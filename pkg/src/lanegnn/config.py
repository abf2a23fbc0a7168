"""Experiment configuration: YAML in, fully resolved YAML out.

Every section maps onto a frozen dataclass; unknown keys are rejected so a
typo cannot silently fall back to a default.  ``resolved_dict`` materialises
every default so a run is reproducible from its snapshot plus the seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .env import EnvConfig
from .errors import ConfigError
from .evaluator import EvaluatorConfig, RewardWeights
from .observers import ObserverConfig
from .ppo import NetworkConfig, TrainConfig
from .sim import (
    ControlBounds,
    IdmParams,
    LaneKeepingGains,
    RoadConfig,
    ScenarioConfig,
)


@dataclass(frozen=True)
class EvalConfig:
    n_scenarios: int = 100
    seed: int = 2024


@dataclass(frozen=True)
class AblationConfig:
    noise_stddev: tuple[float, ...] = (5.0,)


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    observer: ObserverConfig = field(default_factory=ObserverConfig)
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    output_dir: str = "runs/default"

    def __post_init__(self) -> None:
        self.env  # validates reward-weight dominance

    @property
    def env(self) -> EnvConfig:
        return EnvConfig(self.scenario, self.observer, self.evaluator)

    def with_seed(self, seed: int | None) -> "ExperimentConfig":
        if seed is None:
            return self
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))

    def with_network(self, kind: str) -> "ExperimentConfig":
        return dataclasses.replace(self, network=dataclasses.replace(self.network, kind=kind))


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{path}.{name}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _coerce(tp, value: Any, path: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, path) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(a, v, path) for a, v in zip(args, value))
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "config")


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return config_from_dict(data)


def resolved_dict(cfg) -> dict:
    """Plain nested dict with every field (tuples become lists)."""

    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v) if f.init}
        if isinstance(v, (tuple, list)):
            return [conv(x) for x in v]
        if hasattr(v, "value") and not isinstance(v, (int, float, str, bool)):
            return v.value
        return v

    return conv(cfg)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = yaml.safe_dump(resolved_dict(cfg), sort_keys=False, default_flow_style=None)
    path.write_text(text)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(resolved_dict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


__all__ = [
    "AblationConfig",
    "ControlBounds",
    "EvalConfig",
    "ExperimentConfig",
    "IdmParams",
    "LaneKeepingGains",
    "RewardWeights",
    "RoadConfig",
    "config_from_dict",
    "config_hash",
    "dump_config",
    "load_config",
    "resolved_dict",
]
