"""Sectioned key=value run configuration (INI) for CLI runs and sweeps.

Recognized sections map onto the dataclasses of the same role::

    [backbone]  BackboneConfig     [train]    TrainConfig
    [decoder]   DecoderConfig      [pretrain] PretrainSchedule
    [data]      dataset generation options
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig, PretrainSchedule
from .errors import ConfigurationError
from .language import DecoderConfig
from .training import TrainConfig

COMMANDS = ("gen-data", "pretrain", "train", "evaluate", "ablate", "describe", "report")


@dataclass
class DataConfig:
    n_base: int = 30
    n_val: int = 10
    n_novel: int = 10
    images_per_class: int = 50
    n_descriptions: int = 25
    resolution: int = 64


@dataclass
class RunConfig:
    command: str
    out: str | None = None
    data: str | None = None
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    pretrain: PretrainSchedule = field(default_factory=PretrainSchedule)
    generate: DataConfig = field(default_factory=DataConfig)
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigurationError(f"unknown command {self.command!r}")


SECTIONS = {"train": TrainConfig, "backbone": BackboneConfig, "decoder": DecoderConfig,
            "pretrain": PretrainSchedule, "data": DataConfig}
_ATTR = {"train": "train", "backbone": "backbone", "decoder": "decoder", "pretrain": "pretrain", "data": "generate"}


def _coerce(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if raw.strip().lower() in ("", "none"):
            return None
        tp = next(a for a in args if a is not type(None))
        origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if origin is tuple:
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if tp in (int, float, str):
            return tp(raw.strip())
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigurationError(f"unsupported config type for {key}")


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def read_overrides(path) -> dict[str, dict]:
    """Parse an INI file into ``{section: {field: typed value}}``."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigurationError(f"cannot read config file {path}")
    out = {}
    for section in parser.sections():
        if section == "run":
            continue
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        types = _field_types(SECTIONS[section])
        values = {}
        for key, raw in parser.items(section):
            name = key.replace("-", "_")
            if name not in types:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            values[name] = _coerce(raw, types[name], f"[{section}] {key}")
        out[section] = values
    return out


def apply_overrides(run: RunConfig, overrides: dict[str, dict]) -> RunConfig:
    for section, values in overrides.items():
        attr = _ATTR[section]
        current = getattr(run, attr)
        setattr(run, attr, dataclasses.replace(current, **values))
    return run


def write_config(run: RunConfig, path) -> Path:
    """Freeze the fully-resolved configuration as INI."""
    parser = configparser.ConfigParser()
    parser["run"] = {"command": run.command, "out": str(run.out), "data": str(run.data), "seed": str(run.seed),
                     **{k: str(v) for k, v in sorted(run.options.items())}}
    for section, attr in _ATTR.items():
        obj = getattr(run, attr)
        parser[section] = {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        parser.write(fh)
    return path


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)
