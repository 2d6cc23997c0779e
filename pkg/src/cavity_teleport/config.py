"""Flat ``key = value`` configuration files for :class:`ProtocolConfig`.

Lines may carry ``#`` comments.  Booleans accept on/off, true/false, yes/no
and 1/0; optional fields accept ``auto`` or ``none`` for their default.
Complex values use Python syntax, e.g. ``0.6+0.8j``.
"""

from __future__ import annotations

import dataclasses
import json
import math
import typing
from typing import Iterable, Mapping, Optional

from .protocol import ConfigError, ProtocolConfig

ECHO_PREFIX = "# config: "

_TRUE = {"on", "true", "yes", "1"}
_FALSE = {"off", "false", "no", "0"}
_UNSET = {"auto", "none", ""}


def _field_kinds() -> dict[str, tuple[type, bool]]:
    """Map field name -> (base type, optional)."""
    hints = typing.get_type_hints(ProtocolConfig)
    kinds = {}
    for f in dataclasses.fields(ProtocolConfig):
        hint = hints[f.name]
        args = typing.get_args(hint)
        optional = type(None) in args
        base = next(a for a in args if a is not type(None)) if optional else hint
        kinds[f.name] = (base, optional)
    return kinds


FIELD_KINDS = _field_kinds()
CONFIG_KEYS = tuple(FIELD_KINDS)


def parse_value(key: str, raw) -> object:
    """Convert a raw string (or JSON scalar) for ``key`` to its field type."""
    if key not in FIELD_KINDS:
        raise ConfigError(f"unknown config key {key!r}")
    base, optional = FIELD_KINDS[key]
    if raw is None:
        if optional:
            return None
        raise ConfigError(f"{key} cannot be empty")
    text = str(raw).strip()
    if optional and text.lower() in _UNSET:
        return None
    try:
        if base is bool:
            if isinstance(raw, bool):
                return raw
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if base is int:
            as_float = float(text)
            if not as_float.is_integer():
                raise ValueError(text)
            return int(as_float)
        if base is float:
            return float(text)
        if base is complex:
            value = complex(text.replace(" ", ""))
            return value.real if value.imag == 0 else value
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None
    raise ConfigError(f"unsupported field type for {key}")


def from_mapping(values: Mapping[str, object], base: Optional[ProtocolConfig] = None) -> ProtocolConfig:
    """Apply ``values`` on top of ``base`` (defaults when omitted)."""
    changes = {k: parse_value(k, v) for k, v in values.items()}
    try:
        return (base or ProtocolConfig()).replace(**changes)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_lines(lines: Iterable[str]) -> dict[str, str]:
    """Raw ``key -> value`` strings from config lines; later keys override earlier ones."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {body!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in FIELD_KINDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def parse_config_text(text: str, base: Optional[ProtocolConfig] = None) -> ProtocolConfig:
    return from_mapping(parse_lines(text.splitlines()), base)


def load_config(path, base: Optional[ProtocolConfig] = None) -> ProtocolConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, base)


def format_value(value) -> str:
    """Full-precision text that :func:`parse_value` maps back to the same value."""
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, complex):
        return repr(value).strip("()")
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return repr(value)


def config_items(config: ProtocolConfig) -> list[tuple[str, str]]:
    return [(k, format_value(getattr(config, k))) for k in CONFIG_KEYS]


def dump_config(config: ProtocolConfig, prefix: str = "") -> str:
    return "".join(f"{prefix}{k} = {v}\n" for k, v in config_items(config))


def extract_echo(document: str) -> ProtocolConfig:
    """Rebuild the config echoed in a result document of either format."""
    stripped = document.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"document is not valid JSON: {exc}") from None
        if "config" not in data:
            raise ConfigError("document has no config section")
        return from_mapping(data["config"])
    lines = [ln[len(ECHO_PREFIX):] for ln in document.splitlines() if ln.startswith(ECHO_PREFIX)]
    if not lines:
        raise ConfigError("document has no config echo")
    return from_mapping(parse_lines(lines))
