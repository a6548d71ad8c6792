"""Flat ``section.key = value`` text configs mapped onto nested dataclasses."""

from __future__ import annotations

import dataclasses
import types
import typing
from typing import Any

from .errors import ConfigError


def loads_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def dumps_kv(flat: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flat.items())


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def to_flat(obj: Any, prefix: str = "") -> dict[str, str]:
    out: dict[str, str] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(to_flat(value, key + "."))
        else:
            out[key] = _fmt(value)
    return out


def _parse(tp: Any, raw: str, key: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    try:
        if origin in (typing.Union, types.UnionType):
            if raw.lower() == "none" and type(None) in args:
                return None
            inner = [a for a in args if a is not type(None)]
            return _parse(inner[0], raw, key)
        if origin is tuple:
            items = [s.strip() for s in raw.split(",")] if raw.strip() else []
            elem = args[0] if args else str
            return tuple(_parse(elem, s, key) for s in items)
        if tp is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw, 0)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def from_flat(cls: type, flat: dict[str, str], prefix: str = "", strict: bool = True):
    """Build ``cls`` from flat keys; absent keys keep their defaults."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}{f.name}"
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            sub = {k: v for k, v in flat.items() if k.startswith(key + ".")}
            kwargs[f.name] = from_flat(tp, sub, key + ".", strict=False)
        elif key in flat:
            kwargs[f.name] = _parse(tp, flat[key], key)
    obj = cls(**kwargs)
    if strict:
        unknown = sorted(set(flat) - {prefix + k for k in to_flat(obj)})
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return obj
