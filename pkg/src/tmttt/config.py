"""Flat ``key=value`` configuration text: parsing, dumping, and dataclass coercion."""

from __future__ import annotations

import dataclasses
import hashlib
import types
import typing
from pathlib import Path

from .errors import ConfigError


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_kv(text, str(path))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def dump_kv(values: dict) -> str:
    return "".join(f"{k}={format_value(v)}\n" for k, v in values.items())


def _coerce(text: str, tp, key):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        inner = [a for a in args if a is not type(None)]
        if text == "" or text.lower() == "none":
            return None
        return _coerce(text, inner[0], key)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if origin in (tuple, list):
            item = args[0] if args else str
            parts = [p.strip() for p in text.split(",") if p.strip()]
            vals = [_coerce(p, item, key) for p in parts]
            return tuple(vals) if origin is tuple else vals
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    raise ConfigError(f"unsupported field type for {key}: {tp}")


def from_kv(cls, values: dict[str, str], prefix: str = "", strict: bool = True):
    """Build dataclass ``cls`` from string values; keys may carry ``prefix``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in values.items():
        if prefix:
            if not key.startswith(prefix):
                continue
            key = key[len(prefix):]
        if key not in names:
            if strict:
                raise ConfigError(f"unknown key {prefix}{key} for {cls.__name__}")
            continue
        kwargs[key] = _coerce(text, hints[key], prefix + key)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def to_kv(obj, prefix: str = "") -> dict:
    return {prefix + f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def config_hash(*objs) -> str:
    text = "".join(dump_kv(to_kv(o)) for o in objs)
    return hashlib.sha1(text.encode()).hexdigest()[:10]
