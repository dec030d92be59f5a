"""Experiment configuration: one file of record, overridable from flags."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .data import SynthConfig
from .errors import ConfigError
from .inference import InferenceConfig
from .metrics import DEFAULT_TOLERANCE
from .model import FpnConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    manifest: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class EvalConfig:
    tau: int = DEFAULT_TOLERANCE


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: FpnConfig = field(default_factory=FpnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    infer: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs"
    seed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["infer"] = self.infer.to_dict()
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, values, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")
    kwargs = {}
    for name, value in values.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default) and isinstance(value, dict):
            value = _build(type(default), value, f"{where}.{name}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(values: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, values or {}, "config")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        values = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(values or {})


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def replace_in(cfg: ExperimentConfig, dotted: str, value) -> ExperimentConfig:
    """Return ``cfg`` with one nested field replaced, revalidating the section."""
    return replace_many(cfg, {dotted: value})


def replace_many(cfg, updates: dict):
    """Apply several dotted replacements, validating each section once with all its new values."""
    direct, nested = {}, {}
    for dotted, value in updates.items():
        head, _, rest = dotted.partition(".")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            direct[head] = value
    for head, sub in nested.items():
        direct[head] = replace_many(getattr(cfg, head), sub)
    try:
        return dataclasses.replace(cfg, **direct)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def describe_fields(cfg=None, prefix: str = "") -> list[str]:
    """``section.field = default`` lines for every configuration field."""
    cfg = cfg if cfg is not None else ExperimentConfig()
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        name = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            lines += describe_fields(value, name + ".")
        elif f.name == "tta_set":
            lines.append(f"{name} = [{', '.join(str(t) for t in value)}]")
        else:
            lines.append(f"{name} = {value!r}")
    return lines
