"""Flat ``key = value`` config files.

Blank lines and ``#`` comments are ignored. Experiment files group keys with
dotted prefixes (``model.d_model``, ``train.epochs``, ``track.step_size``).
"""

from __future__ import annotations

import dataclasses
import typing

from .errors import InvalidConfig


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{source}:{lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InvalidConfig(f"{source}:{lineno}: empty key")
        if key in out:
            raise InvalidConfig(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def read_kv(path) -> dict[str, str]:
    with open(path) as fh:
        return parse_kv(fh.read(), str(path))


def parse_floats(text: str, n: int, key: str) -> list[float]:
    vals = [float(x) for x in str(text).replace(",", " ").split()]
    if len(vals) != n:
        raise InvalidConfig(f"{key}: expected {n} numbers, got {len(vals)}")
    return vals


def _convert(value: str, tp, key: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union or (origin is not None and type(None) in typing.get_args(tp)):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value.lower() == "none":
            return None
        return _convert(value, args[0], key)
    try:
        if tp is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        return value
    except ValueError as exc:
        raise InvalidConfig(f"{key}: cannot parse {value!r} as {getattr(tp, '__name__', tp)}") from exc


def section(cls, kv: dict[str, str], prefix: str, **overrides):
    """Instantiate dataclass ``cls`` from keys ``prefix.<field>`` in ``kv``."""
    hints = typing.get_type_hints(cls)
    args = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}.{f.name}"
        if key in kv:
            args[f.name] = _convert(kv[key], hints[f.name], key)
    args.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**args)


def check_known(kv: dict[str, str], *pairs) -> None:
    """Reject keys that no ``(cls, prefix)`` pair would consume."""
    known = {f"{p}.{f.name}" for cls, p in pairs for f in dataclasses.fields(cls)}
    unknown = sorted(set(kv) - known)
    if unknown:
        raise InvalidConfig(f"unknown config keys: {', '.join(unknown)}")
