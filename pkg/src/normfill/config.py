"""TOML config files."""

from __future__ import annotations

from pathlib import Path

import tomli
import tomli_w


def read_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomli.load(fh)


def write_toml(path, data: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        tomli_w.dump(_clean(data), fh)
    return path


def _clean(obj):
    # TOML has no null; tuples become arrays
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj
