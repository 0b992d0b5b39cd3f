"""JSON run configuration with strict key checking."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

CONFIG_SCHEMA_VERSION = 1


def dataclass_from_dict(cls, data: dict | None, where: str = ""):
    """Build dataclass ``cls`` from ``data``; unknown keys are an error."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown key(s) {unknown}")
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from exc


def dataclass_to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 80
    n_test: int = 20

    def __post_init__(self):
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("dataset sizes must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    """Top-level config file: every section is optional."""

    generator: Any = None
    data: DataConfig = field(default_factory=DataConfig)
    model: Any = None
    train: Any = None
    ablation: Any = None

    def to_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "generator": dataclass_to_dict(self.generator),
            "data": dataclass_to_dict(self.data),
            "model": dataclass_to_dict(self.model),
            "train": dataclass_to_dict(self.train),
            "ablation": dataclass_to_dict(self.ablation),
        }


def parse_config(data: dict) -> RunConfig:
    # local imports: config sits below the modules whose dataclasses it hosts
    from .ablation import AblationConfig
    from .model import ModelConfig
    from .synth import GenConfig
    from .training import TrainConfig

    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if data.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"config schema_version must be {CONFIG_SCHEMA_VERSION}, got {data.get('schema_version')!r}"
        )
    sections = {"generator", "data", "model", "train", "ablation"}
    unknown = sorted(set(data) - sections - {"schema_version"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    return RunConfig(
        generator=dataclass_from_dict(GenConfig, data.get("generator"), "generator"),
        data=dataclass_from_dict(DataConfig, data.get("data"), "data"),
        model=dataclass_from_dict(ModelConfig, data.get("model"), "model"),
        train=dataclass_from_dict(TrainConfig, data.get("train"), "train"),
        ablation=dataclass_from_dict(AblationConfig, data.get("ablation"), "ablation"),
    )


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return parse_config(data)


def default_config() -> RunConfig:
    return parse_config({"schema_version": CONFIG_SCHEMA_VERSION})


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
