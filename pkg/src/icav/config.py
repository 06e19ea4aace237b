"""Run configuration: one JSON tree that fully determines a run.

Unknown keys are errors. Every subsystem seed derives from the single root
``seed``, so sections carry no seeds of their own.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .diffusion import DropoutConfig, TrainConfig
from .model import ModelConfig
from .sampler import GuidanceConfig
from .schedule import NoiseSchedule
from .synthworld import WorldConfig, derive_seed


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_identities: int = 64
    pairs_per_identity: int = 16
    mix: float = 0.5
    test_fraction: float = 0.2
    world: WorldConfig = WorldConfig()


@dataclass(frozen=True)
class EvalConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    max_items: Optional[int] = 64
    splits: tuple[str, ...] = ("all", "easy", "hard")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    schedule: NoiseSchedule = NoiseSchedule()
    dropout: DropoutConfig = DropoutConfig()
    train: TrainConfig = TrainConfig()
    guidance: GuidanceConfig = GuidanceConfig()
    eval: EvalConfig = EvalConfig()

    # derived, per-subsystem seeds
    def world_config(self) -> WorldConfig:
        return replace(self.data.world, seed=derive_seed(self.seed, "world"))

    def model_config(self) -> ModelConfig:
        return replace(self.model, seed=derive_seed(self.seed, "model"))

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=derive_seed(self.seed, "train"))

    def guidance_config(self) -> GuidanceConfig:
        return replace(self.guidance, seed=derive_seed(self.seed, "sample"))

    @property
    def data_seed(self) -> int:
        return derive_seed(self.seed, "data")

    def to_dict(self) -> dict:
        return _to_dict(self)

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())


_SEEDLESS = {WorldConfig, ModelConfig, TrainConfig, GuidanceConfig}


def _to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in fields(obj):
            if f.name == "seed" and type(obj) in _SEEDLESS:
                continue
            out[f.name] = _to_dict(getattr(obj, f.name))
        return out
    if isinstance(obj, tuple):
        return [_to_dict(x) for x in obj]
    return obj


def _from_dict(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls) if not (f.name == "seed" and cls in _SEEDLESS)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        path = f"{where}.{name}" if where else name
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _from_dict(type(current), value, path)
        elif isinstance(current, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{path}: expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = _check_scalar(path, current, value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


def _check_scalar(path: str, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:  # Optional fields default to None
        ok = value is None or isinstance(value, (int, float, str))
    if not ok:
        raise ConfigError(f"{path}: invalid value {value!r}")
    return value


def from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data, "")


def load_config(path: Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return from_dict(data)


def canonical_json(data: dict) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def fingerprint(data: dict) -> str:
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()


def save_config(cfg: RunConfig, path: Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")


def with_overrides(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Replace fields of one section, e.g. ``with_overrides(cfg, "guidance", s_id=4.0)``."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    return replace(cfg, **{section: replace(getattr(cfg, section), **values)})
