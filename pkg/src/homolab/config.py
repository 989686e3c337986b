"""Flat ``key = value`` config files mapped onto dataclasses.

Values are parsed as JSON when possible (numbers, booleans, lists) and kept
as strings otherwise; comma-separated values become lists.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
from pathlib import Path

from .errors import ConfigError

ALIASES = {"lambda": "lam"}


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [parse_value(t) for t in text.split(",")]
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def read_flat(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[top]\n" + path.read_text())
    return {ALIASES.get(k, k): parse_value(v) for k, v in parser["top"].items()}


def write_flat(path, values: dict) -> None:
    lines = []
    for k in sorted(values):
        v = values[k]
        if isinstance(v, (list, tuple)):
            v = ",".join(json.dumps(x) if not isinstance(x, str) else x for x in v)
        elif not isinstance(v, str):
            v = json.dumps(v)
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def apply(cfg, values: dict, allowed: set | None = None):
    """Return a copy of dataclass ``cfg`` with ``values`` applied; unknown keys raise ConfigError."""
    names = {f.name for f in dataclasses.fields(cfg)}
    if allowed is not None:
        names &= allowed
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    types = {f.name: type(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    clean = {}
    for k, v in values.items():
        t = types[k]
        if t is tuple:
            v = tuple(v) if isinstance(v, (list, tuple)) else (v,)
        elif t is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        elif t is not type(v) and not (t is float and isinstance(v, float)):
            raise ConfigError(f"config key {k}: expected {t.__name__}, got {v!r}")
        clean[k] = v
    return dataclasses.replace(cfg, **clean)


def as_flat(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
