"""Flat ``key = value`` text configs shared by the ECSE engine and the trainer."""

from __future__ import annotations

import dataclasses
from pathlib import Path


def _coerce(text: str, typ, name: str, optional: bool = False):
    text = text.strip()
    if optional and text.lower() == "none":
        return None
    if typ in (bool, "bool"):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    if typ in (int, "int"):
        return int(text)
    if typ in (float, "float"):
        return float(text)
    if typ in ("tuple", tuple):
        return tuple(int(x) for x in text.replace(",", " ").split())
    if text.lower() in ("none", ""):
        return None
    return text


def parse_kv(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def from_kv(cls, text: str, base=None):
    """Build dataclass ``cls`` from key-value text, starting from ``base`` (or defaults)."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    raw = parse_kv(text)
    unknown = set(raw) - set(fields)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        typ = fields[k].type
        optional = False
        if isinstance(typ, str):
            optional = "Optional[" in typ or "None" in typ
            typ = typ.replace("Optional[", "").rstrip("]").split("|")[0].strip()
        kwargs[k] = _coerce(v, typ, k, optional)
    if base is None:
        return cls(**kwargs)
    return dataclasses.replace(base, **kwargs)


def to_kv(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = " ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load(cls, path, base=None):
    return from_kv(cls, Path(path).read_text(), base)
