"""Config plumbing: JSON <-> dataclass conversion, overrides, and hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from pathlib import Path
from typing import Any


class ConfigError(Exception):
    """Invalid configuration value, unknown key, or malformed config file."""


def _resolve_optional(tp):
    # Optional[X] / X | None -> X
    origin = typing.get_origin(tp)
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def dataclass_from_dict(cls, data: dict, path: str = "") -> Any:
    """Build a dataclass from a plain dict, rejecting unknown keys.

    Nested dataclass fields accept nested dicts; tuple fields accept lists.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for '{path or cls.__name__}', got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        where = path or cls.__name__
        raise ConfigError(f"unknown config key(s) in {where}: {', '.join(sorted(unknown))}")
    kwargs = {}
    hints = typing.get_type_hints(cls)
    for name, value in data.items():
        tp = _resolve_optional(hints.get(name, fields[name].type))
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(tp) and isinstance(value, dict):
            kwargs[name] = dataclass_from_dict(tp, value, sub)
        elif typing.get_origin(tp) is tuple and isinstance(value, (list, tuple)):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value in {path or cls.__name__}: {e}") from e


def dataclass_to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = dataclass_to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        elif isinstance(v, Path):
            out[f.name] = str(v)
        else:
            out[f.name] = v
    return out


def apply_overrides(cfg, overrides: dict[str, Any]):
    """Apply dotted-key overrides (e.g. {'fcl.temperature': 0.2}) on top of a dataclass."""
    base = dataclass_to_dict(cfg)
    for dotted, value in overrides.items():
        node = base
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node[parts[-1]] = value
    return dataclass_from_dict(type(cfg), base)


def config_hash(cfg) -> str:
    """Stable hash of a config dataclass (or plain dict)."""
    data = dataclass_to_dict(cfg) if dataclasses.is_dataclass(cfg) else cfg
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_json_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be an object: {path}")
    return data


def dump_json(path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
