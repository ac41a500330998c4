"""Flat key=value config files and the provenance hash.

Precedence everywhere: CLI flag > config file > preset default.  Keys mirror
the config dataclass fields ("lambda" maps to SearchConfig.lambda_).
"""

from __future__ import annotations

import hashlib
from dataclasses import fields
from pathlib import Path

from .errors import FormatError

_BOOL = {"true": True, "1": True, "yes": True,
         "false": False, "0": False, "no": False}


def parse_config_file(path) -> dict[str, str]:
    """key=value lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def coerce(value: str, target_type, key: str):
    try:
        if target_type is bool:
            return _BOOL[value.lower()]
        return target_type(value)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"config key {key}: cannot parse {value!r}") from exc


def apply_file_values(cfg, file_values: dict[str, str], used: set[str]):
    """Overwrite dataclass fields from file values; 'lambda' aliases
    lambda_."""
    alias = {"lambda": "lambda_"}
    by_name = {f.name: f for f in fields(cfg)}
    for key, raw in file_values.items():
        name = alias.get(key, key)
        f = by_name.get(name)
        if f is None:
            continue
        setattr(cfg, name, coerce(raw, f.type if isinstance(f.type, type)
                                  else type(getattr(cfg, name)), key))
        used.add(key)
    return cfg


def config_hash(cfg) -> str:
    """Stable 12-hex-digit digest of the effective configuration."""
    items = sorted(
        (f.name.rstrip("_"), getattr(cfg, f.name)) for f in fields(cfg)
    )
    blob = "\n".join(f"{k}={v!r}" for k, v in items).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]
