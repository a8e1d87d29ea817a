"""Flat key-value configuration files (``key = value`` lines, # comments).

Values are coerced against the target dataclass field types, so the same
loader serves curation settings, train settings, and model settings
(``model_``-prefixed keys).
"""

from __future__ import annotations

import dataclasses
from pathlib import Path


def load_kv_config(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; later keys override earlier ones."""
    out: dict[str, str] = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def coerce_value(raw: str, annotation) -> object:
    text = raw.strip()
    if annotation in (int, "int"):
        return int(text)
    if annotation in (float, "float"):
        return float(text)
    if annotation in (bool, "bool"):
        return parse_bool(text)
    if annotation in (str, "str"):
        return text
    # Optional[bool] / "bool | None" style annotations
    ann = str(annotation)
    if "bool" in ann:
        return None if text.lower() == "none" else parse_bool(text)
    if "int" in ann:
        return None if text.lower() == "none" else int(text)
    if "float" in ann:
        return None if text.lower() == "none" else float(text)
    return text


def apply_to_dataclass(instance, values: dict[str, str], ignore_unknown: bool = False):
    """Return a copy of ``instance`` with matching keys coerced and replaced."""
    field_types = {f.name: f.type for f in dataclasses.fields(instance)}
    updates = {}
    for key, raw in values.items():
        if key not in field_types:
            if ignore_unknown:
                continue
            raise KeyError(f"unknown config key {key!r} for {type(instance).__name__}")
        updates[key] = coerce_value(raw, field_types[key])
    return dataclasses.replace(instance, **updates)


def split_prefixed(values: dict[str, str], prefix: str) -> tuple[dict[str, str], dict[str, str]]:
    """Split keys into (prefixed-with-prefix-stripped, rest)."""
    hit, rest = {}, {}
    for key, value in values.items():
        if key.startswith(prefix):
            hit[key[len(prefix):]] = value
        else:
            rest[key] = value
    return hit, rest
