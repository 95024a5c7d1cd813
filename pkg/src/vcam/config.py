"""Experiment configuration: one YAML file per experiment, overridable from the command line."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .data import DatasetConfig
from .evaluation import EvalProtocol
from .model import BackboneConfig, ConfigurationError
from .training import LossWeights, ScheduleConfig


def default_auxiliary() -> DatasetConfig:
    # more cameras per identity than the target set, so orientations are denser
    return DatasetConfig(num_train_ids=64, num_test_ids=16, images_per_id=40, num_cameras=8,
                         track_length=5, seed=1000)


def default_step1() -> ScheduleConfig:
    return ScheduleConfig(base_lr=0.05, decay_every=1500, total_steps=4000, log_every=50)


def default_step2() -> ScheduleConfig:
    return ScheduleConfig(base_lr=0.005, decay_every=1500, total_steps=4000, log_every=10)


@dataclass
class InterpretConfig:
    stage_index: int = -1
    samples_per_class: int = 100
    threshold: float = 0.5
    num_channels: int = 40
    seed: int = 0


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    auxiliary: DatasetConfig = field(default_factory=default_auxiliary)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    step1: ScheduleConfig = field(default_factory=default_step1)
    step2: ScheduleConfig = field(default_factory=default_step2)
    # auxiliary stage of the two-stage transfer
    transfer: ScheduleConfig = field(default_factory=default_step2)
    loss: LossWeights = field(default_factory=LossWeights)
    eval: EvalProtocol = field(default_factory=EvalProtocol)
    interpret: InterpretConfig = field(default_factory=InterpretConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def validate(self):
        for name in ("dataset", "auxiliary"):
            try:
                getattr(self, name).validate()
            except ValueError as exc:
                raise ConfigurationError(f"{name}: {exc}") from exc
        self.backbone.validate()
        if self.backbone.input_size != self.dataset.image_size:
            raise ConfigurationError(
                f"backbone.input_size={self.backbone.input_size} must equal dataset.image_size="
                f"{self.dataset.image_size}")
        for name in ("step1", "step2", "transfer", "loss"):
            try:
                getattr(self, name).validate()
            except ValueError as exc:
                raise ConfigurationError(f"{name}: {exc}") from exc
        if not 0 <= self.eval.lambda_value <= 1:
            raise ConfigurationError("eval.lambda_value must lie in [0, 1]")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dump())

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        return _build(cls, data or {}, "")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: not valid YAML ({exc})") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)


def _coerce(value, hint, name: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{name} must be a mapping")
        return _build(hint, value, name + ".")
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], name)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigurationError(f"{name} must be a list")
        return [_coerce(v, args[0], f"{name}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{name} must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{name} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{name} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{name} must be a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"unknown config field {prefix}{unknown[0]}")
    kwargs = {k: _coerce(v, hints[k], prefix + k) for k, v in data.items()}
    return cls(**kwargs)


def apply_override(config: ExperimentConfig, assignment: str) -> ExperimentConfig:
    """Apply one ``section.field=value`` override (value parsed as YAML)."""
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} must look like section.field=value")
    key, raw = assignment.split("=", 1)
    data = config.to_dict()
    node = data
    parts = key.strip().split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigurationError(f"unknown config field {key}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigurationError(f"unknown config field {key}")
    node[parts[-1]] = yaml.safe_load(raw)
    return ExperimentConfig.from_dict(data)
