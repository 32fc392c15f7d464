"""Deterministic text output: JSON and CSV with floats at 17 significant digits."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

__all__ = ["format_float", "dumps_json", "write_json", "write_csv"]


def format_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def _scalar(obj):
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    if isinstance(obj, str):
        import json

        return json.dumps(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps_json(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with insertion-ordered keys and ``%.17g`` floats.

    NaN and infinities are written as the bare tokens ``NaN``/``Infinity``,
    which Python's ``json`` module reads back.
    """
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_scalar(str(k))}: {dumps_json(v, indent, _level + 1)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_scalar(v) for v in seq) + "]"
        items = [pad + dumps_json(v, indent, _level + 1) for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    return _scalar(obj)


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(dumps_json(obj) + "\n")
    return path


def write_csv(rows: list[dict], path, fieldnames=None) -> Path:
    """Write dict rows; floats use :func:`format_float`."""
    path = Path(path)
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([
                format_float(v) if isinstance(v, (float, np.floating)) else v
                for v in (row[k] for k in fieldnames)
            ])
    return path
