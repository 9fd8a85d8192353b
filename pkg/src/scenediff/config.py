"""Flat ``key = value`` config files.

Values are parsed as JSON when possible (numbers, booleans, lists, objects)
and fall back to bare strings. Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

from .errors import ParseError, ValidationError


def parse_kv(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParseError("empty key", lineno)
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def format_kv(values: dict) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in values.items())


def dataclass_from_dict(cls, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            v = values[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def load_config(cls, path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return dataclass_from_dict(cls, parse_kv(path.read_text(encoding="utf-8")))


def save_config(obj, path):
    Path(path).write_text(format_kv(to_plain(obj)), encoding="utf-8")


def to_plain(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def config_hash(obj) -> str:
    blob = json.dumps(to_plain(obj), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
