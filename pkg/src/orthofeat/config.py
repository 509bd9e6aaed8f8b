"""Run configuration: a nested YAML document parsed strictly.

Every section maps onto a dataclass; unknown keys anywhere are rejected so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Optional

import yaml

from .data import SynthConfig
from .errors import ConfigError
from .models import DEFAULT_ENCODER_UNITS
from .tensor_core import ACTIVATIONS
from .training import TrainConfig

DATA_SOURCES = ("synth", "idx", "csv")


@dataclass
class IdxPaths:
    images: str = ""
    labels: str = ""
    test_images: Optional[str] = None
    test_labels: Optional[str] = None


@dataclass
class CsvPaths:
    path: str = ""
    test_path: Optional[str] = None
    n_primary: Optional[int] = None
    n_subsidiary: Optional[int] = None


@dataclass
class DataConfig:
    source: str = "synth"
    synth: SynthConfig = field(default_factory=SynthConfig)
    idx: Optional[IdxPaths] = None
    csv: Optional[CsvPaths] = None
    # subsidiary class whose primary labels are hidden during training
    target_domain: Optional[int] = None


@dataclass
class ModelConfig:
    units: list[int] = field(default_factory=lambda: list(DEFAULT_ENCODER_UNITS))
    activation: str = "relu"
    code_activation: str = "identity"


@dataclass
class ProbeConfig:
    s2: bool = True
    s2_epochs: Optional[int] = None
    export_codes: bool = True
    plots: bool = True


@dataclass
class Table1Config:
    primary_epochs: int = 20
    adversarial_epochs: int = 60
    # initialise the subsidiary head from the trained primary head
    subsidiary_from_primary_head: bool = True


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    table1: Table1Config = field(default_factory=Table1Config)
    out_dir: str = "out"

    def validate(self) -> None:
        d = self.data
        if d.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}, got {d.source!r}")
        if d.source == "idx" and (d.idx is None or not d.idx.images or not d.idx.labels):
            raise ConfigError("data.source is 'idx' but data.idx.images / data.idx.labels are missing")
        if d.source == "csv" and (d.csv is None or not d.csv.path):
            raise ConfigError("data.source is 'csv' but data.csv.path is missing")
        if not self.model.units or any(u < 1 for u in self.model.units):
            raise ConfigError("model.units must be a non-empty list of positive widths")
        for key in ("activation", "code_activation"):
            if getattr(self.model, key) not in ACTIVATIONS:
                raise ConfigError(f"model.{key} must be one of {ACTIVATIONS}")
        try:
            self.train.validate()
            if d.source == "synth":
                d.synth.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.probe.s2_epochs is not None and self.probe.s2_epochs < 0:
            raise ConfigError("probe.s2_epochs must be >= 0")
        if self.table1.primary_epochs < 1 or self.table1.adversarial_epochs < 1:
            raise ConfigError("table1 epoch counts must be >= 1")


def _build(cls, raw: Any, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(map(str, unknown))}")
    kwargs = {}
    for name, value in raw.items():
        path = f"{where}.{name}" if where else name
        kwargs[name] = _convert(fields[name], value, path)
    return cls(**kwargs)


_NESTED = {
    "synth": SynthConfig,
    "idx": IdxPaths,
    "csv": CsvPaths,
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "probe": ProbeConfig,
    "table1": Table1Config,
}


def _convert(f: dataclasses.Field, value, path: str):
    if f.name in _NESTED and dataclasses.is_dataclass(_NESTED[f.name]):
        return _build(_NESTED[f.name], value, path)
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" (no dot) as a string
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{path} must be a number") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{path} must be a list of integers")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path} must be a string")
    if f.name in ("n_primary", "n_subsidiary", "target_domain", "s2_epochs") and not isinstance(value, int):
        raise ConfigError(f"{path} must be an integer")
    if f.name in ("test_images", "test_labels", "test_path") and not isinstance(value, str):
        raise ConfigError(f"{path} must be a string")
    return value


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{source}: not valid YAML: {e}") from None
    if not isinstance(raw, dict) or not isinstance(raw.get("data"), dict) or "source" not in raw["data"]:
        raise ConfigError(f"{source}: required key data.source is missing")
    try:
        cfg = _build(RunConfig, raw, "")
        cfg.validate()
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, str(path))


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
