"""Experiment configuration: strict schema, YAML loading, dotted overrides.

The configuration tree mirrors the library dataclasses one-to-one.  Unknown
keys are rejected with their full path; flag overrides (``a.b.c=value``)
win over file values; the single experiment seed is propagated into the
scene and training sub-configs so one number governs scene generation,
parameter initialization, homography sampling, and data order.
"""

from __future__ import annotations

import dataclasses
import typing

import yaml

from .detector import BackboneConfig
from .synthbench import Counts, SceneSpec, ShiftSpec
from .training import ConfigError, TrainingConfig


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    tau: float = 0.05
    nms_iou: float = 0.5


@dataclasses.dataclass
class ExperimentConfig:
    scene: SceneSpec = dataclasses.field(default_factory=SceneSpec)
    shift: ShiftSpec = dataclasses.field(default_factory=ShiftSpec)
    counts: Counts = dataclasses.field(default_factory=Counts)
    backbone: BackboneConfig = dataclasses.field(default_factory=BackboneConfig)
    training: TrainingConfig = dataclasses.field(default_factory=TrainingConfig)
    evaluation: EvalConfig = dataclasses.field(default_factory=EvalConfig)
    seed: int = 0

    def __post_init__(self):
        # one seed to govern them all
        self.scene = dataclasses.replace(self.scene, seed=self.seed)
        self.training = dataclasses.replace(self.training, seed=self.seed)

    @property
    def num_classes(self) -> int:
        return len(self.scene.classes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return _tuples_to_lists(d)


def _tuples_to_lists(obj):
    if isinstance(obj, dict):
        return {k: _tuples_to_lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_tuples_to_lists(v) for v in obj]
    return obj


def _build_dataclass(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(
            f"{path or 'config'}: unknown key(s) {sorted(unknown)}; "
            f"valid keys: {sorted(fields)}"
        )
    kwargs = {}
    hints = typing.get_type_hints(cls)
    for name, value in data.items():
        sub_path = f"{path}.{name}" if path else name
        target = hints.get(name, fields[name].type)
        if dataclasses.is_dataclass(target):
            kwargs[name] = _build_dataclass(target, value, sub_path)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build_dataclass(ExperimentConfig, data or {}, "")


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Load a YAML config file and apply dotted-path overrides.

    ``overrides`` entries look like ``training.lam=0.05`` or ``seed=3``;
    values are parsed as YAML scalars (so ``true``, ``0.5``, ``[1,2]`` work).
    """
    data = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for entry in overrides:
        if "=" not in entry:
            raise ConfigError(f"override {entry!r} is not of the form key.path=value")
        key, raw = entry.split("=", 1)
        value = yaml.safe_load(raw)
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {entry!r}: {part} is not a mapping")
        node[parts[-1]] = value
    return config_from_dict(data)


def dump_config(config: ExperimentConfig, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)
