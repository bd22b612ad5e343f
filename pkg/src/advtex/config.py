"""Run configurations for the command-line tools, loaded from YAML or JSON with dotted overrides."""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .attack import AttackConfig
from .data import SyntheticSceneSpec
from .detector.inference import DetectorConfig
from .detector.training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class GenerateDataConfig:
    scene: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)


@dataclass
class TrainDetectorConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    # checked against this dataset's clean frames after training (optional)
    dataset: str | None = None
    name: str = "detector"


@dataclass
class AttackRunConfig:
    dataset: str = "data/synthetic"
    detector: str = "detector.pt"
    mode: str = "cross_view"
    attack: AttackConfig = field(default_factory=AttackConfig)
    # root-coordinate rectangle (x0, y0, x1, y1) for a localized attack
    region: list[int] | None = None
    # single-image mode
    split: str = "test"
    frames: int = 10
    image_region: str = "image"

    def __post_init__(self):
        if self.mode not in ("cross_view", "single_image"):
            raise ConfigError(f"unknown attack mode {self.mode!r}")


@dataclass
class EvaluateConfig:
    dataset: str = "data/synthetic"
    # name -> checkpoint path
    detectors: dict[str, str] = field(default_factory=dict)
    # texture.npy or an attack run directory; None evaluates clean frames
    texture: str | None = None
    attack_id: str | None = None
    defenses: list[str] = field(default_factory=lambda: ["none"])
    splits: list[str] = field(default_factory=lambda: ["train", "val", "test"])
    detector_config: DetectorConfig = field(default_factory=DetectorConfig)
    annotate: bool = False
    workers: int = 1


@dataclass
class TransferConfig(EvaluateConfig):
    source: str = "A"
    target: str = "B"


@dataclass
class RegressConfig:
    # report directories written by evaluate / defend-evaluate / transfer
    reports: list[str] = field(default_factory=list)
    l1_strength: float | None = None
    defense: str = "none"
    seed: int = 0


@dataclass
class ReportConfig:
    reports: list[str] = field(default_factory=list)


def defend_evaluate_defaults() -> EvaluateConfig:
    return EvaluateConfig(defenses=["none", "down_up", "tv:0.05", "tv:0.1", "tv:0.2"])


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _strip_optional(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def _coerce(tp, value, path: str):
    tp = _strip_optional(tp)
    if value is None:
        return None
    if _is_dataclass_type(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return from_dict(tp, value, path)
    origin = typing.get_origin(tp)
    if origin is tuple:
        return tuple(value)
    if tp is float and isinstance(value, (int, float)):
        return float(value)
    if tp is int and isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def from_dict(cls, data: dict, path: str = ""):
    """Build dataclass ``cls`` from a nested mapping; unknown keys are an error."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{path}{k}.") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or cls.__name__}: {e}") from e


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_dict(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def read_config_file(path) -> dict:
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``a.b.c=value``; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {assignment!r}: {p} is not a mapping")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(cls, path=None, overrides=(), defaults=None):
    """Defaults, then the config file, then ``key=value`` overrides."""
    data = to_dict(defaults) if defaults is not None else {}
    if path is not None:
        _deep_update(data, read_config_file(path))
    for o in overrides:
        apply_override(data, o)
    return from_dict(cls, data)


def _deep_update(base: dict, new: dict) -> None:
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v


def dump_config(config, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(config), sort_keys=False))
