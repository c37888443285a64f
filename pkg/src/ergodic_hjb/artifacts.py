"""Deterministic CSV and sidecar writers shared by the run pipeline."""

from __future__ import annotations

import csv
import hashlib
import json
import pathlib
from typing import Iterable, Sequence

import numpy as np

FLOAT_FMT = "%.17g"


def fmt(value) -> str:
    """Round-trip decimal text for numbers; ``str`` for everything else."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return FLOAT_FMT % float(value)
    return str(value)


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> pathlib.Path:
    """CSV with a header row, '.' decimals and '\\n' line endings."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON text of ``config``."""
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def write_json(path, obj) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def write_sidecar(csv_path, meta: dict) -> pathlib.Path:
    """Metadata next to a CSV, as ``<name>.meta.json``."""
    csv_path = pathlib.Path(csv_path)
    return write_json(csv_path.with_suffix(".meta.json"), meta)


def write_field(path, field, meta: dict = None) -> list:
    """Node coordinates and values of a grid field, plus a sidecar."""
    grid = field.grid
    header = [f"x_{i + 1}" for i in range(grid.dim)] + ["value"]
    rows = (list(p) + [v] for p, v in zip(grid.points, field.values))
    p = write_table(path, header, rows)
    side = {"kind": field.kind, "params": field.params, "iterations": field.iterations, "residual": field.residual}
    side.update(grid.describe())
    side.update(meta or {})
    return [p, write_sidecar(p, side)]


def flatten(obj, prefix: str = "") -> dict:
    """Nested dicts to dotted keys."""
    out = {}
    if isinstance(obj, dict):
        for k, v in obj.items():
            out.update(flatten(v, f"{prefix}{k}."))
    elif isinstance(obj, (list, tuple)) and obj and all(isinstance(v, (int, float, np.number)) for v in obj):
        out[prefix[:-1]] = ",".join(fmt(v) for v in obj)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            out.update(flatten(v, f"{prefix}{i}."))
    else:
        out[prefix[:-1]] = fmt(obj) if obj is not None else ""
    return out


def write_key_values(path, obj) -> pathlib.Path:
    path = pathlib.Path(path)
    flat = flatten(obj)
    path.write_text("".join(f"{k}={flat[k]}\n" for k in sorted(flat)))
    return path
