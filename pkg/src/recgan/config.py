"""Plain-text ``key = value`` configuration mirroring the dataclass configs."""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .dataset import VIEW_PROFILES, ViewConfig
from .nets import PROFILES, ArchConfig
from .train import TrainConfig

CONFIG_TYPES = (ArchConfig, TrainConfig, ViewConfig)


class ConfigFileError(ValueError):
    pass


def _fields(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


KNOWN_KEYS = sorted({k for cls in CONFIG_TYPES for k in _fields(cls)})


def parse_config(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigFileError(f"line {lineno}: unknown key {key!r}")
        out[key] = value
    return out


def load_config(path: str | Path) -> dict[str, str]:
    return parse_config(Path(path).read_text())


def _convert(value, typ):
    if not isinstance(value, str):
        return value
    origin = typing.get_origin(typ)
    if origin in (list, tuple):
        (inner, *_) = typing.get_args(typ)
        items = [_convert(v.strip(), inner) for v in value.split(",") if v.strip()]
        return items if origin is list else tuple(items)
    if typ is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return typ(value)


def build(cls, values: dict, base=None):
    """Instantiate ``cls`` from ``base`` (or defaults) overridden by matching keys in ``values``."""
    types = _fields(cls)
    kwargs = dataclasses.asdict(base) if base is not None else {}
    for key, typ in types.items():
        if key in values and values[key] is not None:
            try:
                kwargs[key] = _convert(values[key], typ)
            except ValueError as exc:
                raise ConfigFileError(f"{key}: {exc}") from None
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigFileError(f"invalid {cls.__name__}: {exc}") from None


def build_all(values: dict, profile: str = "desk") -> tuple[ArchConfig, TrainConfig, ViewConfig]:
    return (build(ArchConfig, values, PROFILES[profile]),
            build(TrainConfig, values),
            build(ViewConfig, values, VIEW_PROFILES[profile]))
