"""Experiment configuration: JSON files mapped onto nested dataclasses.

Unknown keys are rejected with their full dotted path so typos fail loudly.
``k_w`` accepts a number, ``Infinity``, or the string ``"inf"``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .train import DatasetSpec, Schedule


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass(frozen=True)
class ModelSpec:
    widths: tuple[int, ...] = (16, 32, 64)


@dataclass(frozen=True)
class ClipSpec:
    k_w: float = 2.0
    k_a: float = 4.0
    lam: float = 0.01


@dataclass(frozen=True)
class GridSpec:
    """Group sizes x weight bitwidths finetuned from one shared float model."""

    gs: tuple[int, ...] = (1, 4, -1)
    bits_w: tuple[int, ...] = (2, 3)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = DatasetSpec()
    model: ModelSpec = ModelSpec()
    clip: ClipSpec = ClipSpec()
    bits_w: int = 2
    bits_a: int | None = 4
    gs: int = -1
    alpha_source: str = "scale_clip"
    skip_first_layer: bool = True
    pretrain: Schedule = Schedule(epochs=30, lr=0.1)
    finetune: Schedule = Schedule(epochs=10, lr=0.01)
    phases: tuple[str, ...] = ("pretrain", "finetune")
    init_checkpoint: str | None = None
    grid: GridSpec | None = None
    seed: int = 0
    out_dir: str = "runs/default"


# JSON spelling of fields whose Python name differs
ALIASES = {"lam": "lambda"}
PHASES = ("pretrain", "finetune")


def _json_name(f: dataclasses.Field) -> str:
    return ALIASES.get(f.name, f.name)


def _coerce(value: Any, default: Any, key: str):
    if isinstance(default, bool) or default is None and isinstance(value, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, float):
        if value in ("inf", "Infinity"):
            return math.inf
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Any, prefix: str, base=None):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", f"expected an object, got {type(data).__name__}")
    base = base if base is not None else cls()
    fields = {_json_name(f): f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}", f"unknown key (allowed: {', '.join(sorted(fields))})")
    kwargs = {}
    for jname, f in fields.items():
        if jname not in data:
            continue
        key = f"{prefix}{jname}"
        default = getattr(base, f.name)
        value = data[jname]
        if f.name == "grid":
            kwargs[f.name] = None if value is None else _build(GridSpec, value, key + ".")
        elif dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), value, key + ".", default)
        elif value is None:
            kwargs[f.name] = None
        else:
            kwargs[f.name] = _coerce(value, default, key)
    return dataclasses.replace(base, **kwargs)


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.alpha_source not in ("scale_clip", "ql_search"):
        raise ConfigError("alpha_source", "must be 'scale_clip' or 'ql_search'")
    bad = [p for p in cfg.phases if p not in PHASES]
    if bad or not cfg.phases:
        raise ConfigError("phases", f"must be a nonempty subset of {PHASES}")
    if "pretrain" not in cfg.phases and cfg.init_checkpoint is None:
        raise ConfigError("init_checkpoint", "required when the pretrain phase is skipped")
    if not 1 <= cfg.bits_w <= 8:
        raise ConfigError("bits_w", "must be in 1..8")
    if cfg.bits_a is not None and not 1 <= cfg.bits_a <= 8:
        raise ConfigError("bits_a", "must be in 1..8 or null")
    if cfg.gs == 0 or cfg.gs < -1:
        raise ConfigError("gs", "must be >= 1 or -1")
    if cfg.clip.k_w < 1:
        raise ConfigError("clip.k_w", "must be >= 1 (or inf)")
    if not 0 < cfg.clip.lam <= 1:
        raise ConfigError("clip.lambda", "must lie in (0, 1]")


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    _validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("<file>", f"invalid JSON ({e})") from None
    return config_from_dict(data)


def config_to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            v = config_to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, float) and math.isinf(v):
            v = "inf"
        out[_json_name(f)] = v
    return out


def dump_config(cfg) -> str:
    return json.dumps(config_to_dict(cfg), indent=2)
