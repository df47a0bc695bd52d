"""Experiment configuration: nested YAML checked against the dataclass schema."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from sourcefree.deployment import AdaptationConfig
from sourcefree.errors import ConfigurationError
from sourcefree.models import ArchSpec
from sourcefree.procurement import ProcurementConfig
from sourcefree.synthetic import SyntheticTaskSpec, class_name

OUTPUT_ROOT_ENV = "SOURCEFREE_OUTPUT_ROOT"


@dataclass
class LabelConfig:
    # class names (directory names); integers are read as synthetic class ids
    source: list = field(default_factory=lambda: list(range(6)))
    target: list = field(default_factory=lambda: list(range(2, 9)))


@dataclass
class DataConfig:
    source: str = ""  # defaults to <output_dir>/data/source
    target: str = ""  # defaults to <output_dir>/data/target
    negatives: str = ""  # defaults to <output_dir>/negatives


@dataclass
class NegativeConfig:
    requested: int = 1_000_000  # more than C(|Cs|, 2) means the full table
    per_class: int = 20
    seed: int = 0


@dataclass
class EvalConfig:
    ssm_bins: int = 20
    one_shot: bool = False


@dataclass
class GridConfig:
    universe: int = 10
    source_private: list = field(default_factory=lambda: [0, 2, 4])
    target_private: list = field(default_factory=lambda: [0, 2, 4])


@dataclass
class ExperimentConfig:
    output_dir: str = "runs/default"
    seed: int = 0
    synthetic: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    labels: LabelConfig = field(default_factory=LabelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    negatives: NegativeConfig = field(default_factory=NegativeConfig)
    arch: ArchSpec = field(default_factory=ArchSpec)
    procurement: ProcurementConfig = field(default_factory=ProcurementConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    device: str = "cpu"

    @property
    def out(self) -> Path:
        p = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p

    def path(self, key: str) -> Path:
        value = getattr(self.data, key)
        if value:
            return Path(value)
        return self.out / ("negatives" if key == "negatives" else f"data/{key}")

    @property
    def source_names(self) -> list[str]:
        return [_name(c) for c in self.labels.source]

    @property
    def target_names(self) -> list[str]:
        return [_name(c) for c in self.labels.target]

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def validate(self) -> "ExperimentConfig":
        if not self.labels.source:
            raise ConfigurationError("labels.source must be non-empty")
        if len(set(self.source_names)) != len(self.source_names):
            raise ConfigurationError("labels.source has duplicates")
        self.procurement.validate()
        self.adaptation.validate()
        self.synthetic.validate()
        if self.device != "cpu":
            raise ConfigurationError(f"device {self.device!r} is not available in this build")
        return self


def _name(c) -> str:
    return class_name(c) if isinstance(c, int) else str(c)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{where}: expected a mapping")
        return _build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads "1e-4" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string, got {value!r}")
        return value
    if origin is tuple or tp is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where}: expected a list")
        args = typing.get_args(tp)
        inner = args[0] if args else Any
        return tuple(value if inner is Any else [_coerce(inner, v, where) for v in value])
    if origin is list or tp is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where}: expected a list")
        return list(value)
    return value


def _build(cls, values: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(values) - names
    if unknown:
        raise ConfigurationError(f"unknown config keys at {where or 'top level'}: {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def from_dict(values: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, values or {}).validate()


def apply_overrides(values: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars or lists."""
    values = dict(values)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override {item!r} is not key=value")
        node = values
        parts = key.split(".")
        for p in parts[:-1]:
            child = node.get(p)
            child = dict(child) if isinstance(child, dict) else {}
            node[p] = child
            node = child
        node[parts[-1]] = yaml.safe_load(raw)
    return values


def _read_values(path) -> dict:
    if path is None:
        return {}
    try:
        values = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigurationError(f"config {path} must be a mapping")
    return values


def peek_output_dir(path=None, overrides: list[str] = ()) -> Path | None:
    """Best-effort output directory for error records when the config itself is invalid."""
    try:
        values = apply_overrides(_read_values(path), list(overrides))
        out = values.get("output_dir", ExperimentConfig.output_dir)
        return ExperimentConfig(output_dir=str(out)).out
    except Exception:
        return None


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> ExperimentConfig:
    return from_dict(apply_overrides(_read_values(path), list(overrides)))


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
