"""TOML run configuration.

A config file must contain exactly the five sections [model],
[schedule], [data], [optimizer], and [run]; unknown sections or keys
are rejected rather than ignored, so typos fail loudly. Values are
dotted-path overridable from the command line ("schedule.k=3"), and the
fully resolved config serializes back to canonical TOML whose sha256
prefix stamps every CSV artifact.

Schedule note: ``boundaries`` are cycle switch points in epochs, in the
same units as ``total_epochs``. Left unset with k=2 they default to the
160-epoch reference points 60 and 110 scaled by total_epochs / 160; any
other k requires explicit boundaries (or split="equal").
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .errors import ConfigError

__all__ = [
    "ModelSection", "ScheduleSection", "DataSection", "OptimizerSection",
    "RunSection", "RunConfig", "load_config", "parse_config", "apply_overrides",
    "serialize_config", "config_hash",
]

_REFERENCE_EPOCHS = 160.0
_REFERENCE_BOUNDARIES = (60.0, 110.0)


@dataclass(frozen=True)
class ModelSection:
    blocks_per_stage: tuple = (2, 2, 2)
    base_filters: tuple = (16, 32, 64)
    width_multiplier: int = 1
    step_size: float = 1.0
    step_size_mode: str = "explicit"
    num_classes: int = 10


@dataclass(frozen=True)
class ScheduleSection:
    k: int = 2
    split: str = "explicit"  # explicit (epoch boundaries) | equal
    total_epochs: float = 160.0
    boundaries: tuple | None = None
    eta_min: float = 0.001
    eta_max: float = 0.5
    reset_lr: bool = True


@dataclass(frozen=True)
class DataSection:
    name: str = "synthetic"  # synthetic | cifar10 | mnist
    dir: str = ""
    batch_size: int = 100
    subset_size: int = 0  # 0 = all; otherwise a class-balanced train subset
    pad: int = 4
    random_crop: bool = True
    hflip: bool = True
    standardize: str = "per_image"
    prefetch: bool = False
    prefetch_capacity: int = 4
    synth_train: int = 5000
    synth_test: int = 1000
    synth_hw: int = 32
    synth_channels: int = 3
    synth_classes: int = 10
    synth_noise: float = 64.0
    synth_seed: int = 1234


@dataclass(frozen=True)
class OptimizerSection:
    momentum: float = 0.9
    weight_decay: float = 0.0002
    reset_momentum: bool = True


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    deterministic: bool = True
    output_dir: str = "runs/out"
    precision: str = "float32"
    eval_each_cycle: bool = True


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    data: DataSection = field(default_factory=DataSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    run: RunSection = field(default_factory=RunSection)


_SECTIONS = {
    "model": ModelSection,
    "schedule": ScheduleSection,
    "data": DataSection,
    "optimizer": OptimizerSection,
    "run": RunSection,
}


def _coerce(section: str, key: str, ftype, value):
    where = f"{section}.{key}"
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if ftype is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if ftype is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if ftype is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    # remaining fields are numeric tuples (or None-able tuples)
    if value is None:
        return None
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{where}: expected an array, got {value!r}")
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{where}: array elements must be numbers, got {v!r}")
        out.append(v)
    return tuple(out)


def _build_section(name: str, raw: dict):
    cls = _SECTIONS[name]
    types = {f.name: str(f.type) for f in fields(cls)}
    unknown = set(raw) - set(types)
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in section [{name}]")
    kwargs = {}
    for key, value in raw.items():
        # annotations are strings here; anything not scalar is a tuple field
        ftype = {"int": int, "float": float, "bool": bool, "str": str}.get(
            types[key], tuple)
        kwargs[key] = _coerce(name, key, ftype, value)
    return cls(**kwargs)


def _validate(cfg: RunConfig) -> RunConfig:
    m, s, d, o, r = cfg.model, cfg.schedule, cfg.data, cfg.optimizer, cfg.run
    if len(m.blocks_per_stage) != 3 or any(
            not isinstance(b, int) or b < 1 for b in m.blocks_per_stage):
        raise ConfigError(f"model.blocks_per_stage must be three positive "
                          f"integers, got {m.blocks_per_stage}")
    if len(m.base_filters) != 3 or any(
            not isinstance(b, int) or b < 1 for b in m.base_filters):
        raise ConfigError(f"model.base_filters must be three positive integers")
    if m.width_multiplier < 1:
        raise ConfigError("model.width_multiplier must be >= 1")
    if m.step_size_mode not in ("implicit", "explicit"):
        raise ConfigError(f"model.step_size_mode {m.step_size_mode!r} unknown")
    if not m.step_size > 0:
        raise ConfigError("model.step_size must be positive")
    if m.step_size_mode == "implicit" and m.step_size != 1.0:
        raise ConfigError("implicit step-size mode fixes step_size at 1")
    if m.num_classes < 2:
        raise ConfigError("model.num_classes must be >= 2")

    if s.k < 0:
        raise ConfigError(f"schedule.k must be >= 0, got {s.k}")
    if s.split not in ("explicit", "equal"):
        raise ConfigError(f"schedule.split {s.split!r} unknown")
    if not s.total_epochs > 0:
        raise ConfigError("schedule.total_epochs must be positive")
    if s.boundaries is not None:
        b = s.boundaries
        if len(b) != s.k:
            raise ConfigError(f"schedule.boundaries lists {len(b)} switch points "
                              f"but k={s.k}")
        if any(x <= 0 or x >= s.total_epochs for x in b) or list(b) != sorted(b):
            raise ConfigError("schedule.boundaries must increase strictly inside "
                              "(0, total_epochs)")
    if not (0 < s.eta_min < s.eta_max):
        raise ConfigError(f"need 0 < eta_min < eta_max, got {s.eta_min}, {s.eta_max}")

    if d.name not in ("synthetic", "cifar10", "mnist"):
        raise ConfigError(f"data.name {d.name!r} unknown")
    if d.name != "synthetic" and not d.dir:
        raise ConfigError(f"data.dir is required for data.name={d.name!r}")
    if d.batch_size < 1:
        raise ConfigError("data.batch_size must be >= 1")
    if d.subset_size < 0:
        raise ConfigError("data.subset_size must be >= 0")
    if d.standardize not in ("per_image", "global", "none"):
        raise ConfigError(f"data.standardize {d.standardize!r} unknown")
    if d.pad < 0:
        raise ConfigError("data.pad must be >= 0")
    if d.prefetch_capacity < 1:
        raise ConfigError("data.prefetch_capacity must be >= 1")
    if min(d.synth_train, d.synth_test, d.synth_hw, d.synth_channels) < 1:
        raise ConfigError("synthetic dimensions must be positive")
    if d.synth_classes < 2:
        raise ConfigError("data.synth_classes must be >= 2")

    if not 0 <= o.momentum < 1:
        raise ConfigError(f"optimizer.momentum must be in [0, 1), got {o.momentum}")
    if o.weight_decay < 0:
        raise ConfigError("optimizer.weight_decay must be >= 0")

    if r.precision not in ("float32", "float64"):
        raise ConfigError(f"run.precision {r.precision!r} unknown")
    if not r.output_dir:
        raise ConfigError("run.output_dir must be set")
    return cfg


def parse_config(text: str) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML: {e}")
    return _config_from_dict(raw)


def _config_from_dict(raw: dict) -> RunConfig:
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section [{sorted(unknown)[0]}]")
    missing = set(_SECTIONS) - set(raw)
    if missing:
        raise ConfigError(f"config is missing section [{sorted(missing)[0]}] "
                          "(all five sections are required)")
    sections = {}
    for name in _SECTIONS:
        if not isinstance(raw[name], dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _build_section(name, raw[name])
    return _validate(RunConfig(**sections))


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply "section.key=value" strings to a parsed TOML dict; values are
    parsed as TOML themselves, so strings need quotes."""
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not of the form section.key=value")
        path, text = ov.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override path {path!r} must be section.key")
        section, key = parts
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r} in override {ov!r}")
        try:
            value = tomllib.loads(f"v = {text.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            raise ConfigError(f"cannot parse override value {text.strip()!r} "
                              "(strings need quotes)")
        raw.setdefault(section, {})[key] = value
    return raw


def load_config(path: str, overrides: list[str] | None = None) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw_bytes = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = tomllib.loads(raw_bytes.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"{path}: invalid TOML: {e}")
    if not raw:
        raise ConfigError(f"{path}: empty config (all five sections are required)")
    if overrides:
        raw = apply_overrides(raw, list(overrides))
    return _config_from_dict(raw)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, tuple):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {v!r}")


def serialize_config(cfg: RunConfig) -> str:
    """Canonical TOML: fixed section and key order, repr floats, unset
    optional keys omitted. parse(serialize(cfg)) == cfg."""
    lines = []
    for name in ("model", "schedule", "data", "optimizer", "run"):
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(section):
            v = getattr(section, f.name)
            if v is None:
                continue
            lines.append(f"{f.name} = {_format_value(v)}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: RunConfig) -> str:
    """First 12 hex digits of the sha256 of the canonical serialization."""
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()[:12]
