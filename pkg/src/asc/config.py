"""Run configuration: one JSON document, strictly validated."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentConfig, DataConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .grouping import AscConfig
from .trainer import TrainConfig


@dataclass
class ProbeConfig:
    n_clips: int = 450
    train_fraction: float = 2 / 3
    seed: int = 12345
    epochs: int = 100
    lr: float = 0.1
    momentum: float = 0.0
    batch_size: int = 8

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.n_clips < 2 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("probe needs n_clips >= 2, epochs >= 1 and batch_size >= 1")


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    out: str = "runs/default"

    def __post_init__(self):
        if self.data.image_size != self.encoder.image_size:
            raise ConfigError(f"data.image_size {self.data.image_size} != encoder.image_size "
                              f"{self.encoder.image_size}")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    def replace(self, **updates) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"encoder.asc.merge": "max"})``."""
        d = self.to_dict()
        for path, value in updates.items():
            node = d
            *head, last = path.split(".")
            for key in head:
                node = node[key]
            if last not in node:
                raise ConfigError(f"unknown config key {path!r}")
            node[last] = value
        return RunConfig.from_dict(d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown config keys at {where or 'top level'}: {unknown}")
    kwargs = {}
    for name, value in d.items():
        tp = hints[name]
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, path)
        else:
            kwargs[name] = _coerce(tp, value, path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list")
        return tuple(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    return value


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(raw)


__all__ = ["AscConfig", "AugmentConfig", "DataConfig", "EncoderConfig", "ProbeConfig",
           "RunConfig", "TrainConfig", "load_config"]
