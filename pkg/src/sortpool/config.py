"""Experiment configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Every key must name a field of
``ExperimentConfig``; values are coerced to the field's type.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional

from .pooling import MODES, PoolConfig, PoolConfigError


class ConfigError(ValueError):
    pass


class UnknownKeyError(ConfigError):
    pass


class ConfigTypeError(ConfigError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    data_dir: str = "data/mnist"
    subset: int = 10000
    test_subset: int = 0
    synthetic_train: int = 10000
    synthetic_test: int = 1000
    pool_mode: str = "max"
    pool_k: int = 1
    init: str = "uniform"
    init_rate: float = 1.0
    epochs: int = 3
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    pool_learning_rate: Optional[float] = None
    pool_weight_decay: Optional[float] = None
    seed: int = 1
    replicates: int = 5
    eval_every: int = 0
    out_dir: str = "runs"
    train_classes: str = "0,1,2,3,4"
    episodes: int = 1000
    episode_seed: int = 7

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.dataset not in ("mnist", "synthetic"):
            raise ConfigError(f"dataset must be 'mnist' or 'synthetic', got {self.dataset!r}")
        if self.pool_mode not in MODES:
            raise ConfigError(f"pool_mode must be one of {MODES}, got {self.pool_mode!r}")
        if self.init not in ("uniform", "expdecay"):
            raise ConfigError(f"init must be 'uniform' or 'expdecay', got {self.init!r}")
        for name in ("pool_k", "epochs", "batch_size", "replicates", "synthetic_train",
                     "synthetic_test", "episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("subset", "test_subset", "eval_every", "seed", "episode_seed", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not self.learning_rate > 0 or not self.init_rate > 0:
            raise ConfigError("learning_rate and init_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        try:
            self.pool_config()
        except PoolConfigError as exc:
            raise ConfigError(str(exc)) from None

    def pool_config(self, kernel=(3, 3)) -> PoolConfig:
        k = self.pool_k if self.pool_mode in ("kth", "sorted") else 1
        return PoolConfig(kernel, (2, 2), self.pool_mode, k)

    @property
    def variant(self) -> str:
        return self.pool_config().label()

    def class_split(self) -> tuple[list[int], list[int]]:
        train = sorted({int(c) for c in self.train_classes.split(",") if c.strip()})
        if not train or min(train) < 0 or max(train) > 9:
            raise ConfigError(f"train_classes must list digits 0-9, got {self.train_classes!r}")
        held_out = [c for c in range(10) if c not in train]
        return train, held_out

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"

    def architecture_hash(self) -> str:
        """Hash of the settings that determine parameter names and shapes."""
        arch = f"pool_mode={self.pool_mode};pool_k={self.pool_config().k};input=1x28x28;classes=10"
        return hashlib.sha256(arch.encode()).hexdigest()


def _field_types() -> dict[str, str]:
    return {f.name: f.type for f in fields(ExperimentConfig)}


def coerce(key: str, raw: str) -> Any:
    types = _field_types()
    if key not in types:
        raise UnknownKeyError(f"unknown config key {key!r}")
    typ = types[key]
    raw = raw.strip()
    optional = typ.startswith("Optional")
    if optional and raw in ("", "none", "None"):
        return None
    base = typ.removeprefix("Optional[").removesuffix("]")
    try:
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
    except ValueError:
        raise ConfigTypeError(f"config key {key!r} expects {base}, got {raw!r}") from None
    return raw


def parse_config_text(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = coerce(key, raw)
    base = base or ExperimentConfig()
    return base.replace(**values)


def parse_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())
