"""Tabular results and their CSV / JSON serialization.

CSV files are UTF-8, comma separated, one header row, floats written with
15 significant digits.  Provenance (resolved configuration and package
version) goes into leading ``#`` comment lines.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

FLOAT_FMT = "{:.15g}"


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT.format(float(v))
    return str(v)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else str(x)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


@dataclass
class SweepTable:
    """Rows of a parameter sweep, sorted by the parameter column."""

    param: str
    columns: list
    rows: list
    meta: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.columns[0] != self.param:
            raise ValueError("first column must be the swept parameter")
        self.rows = sorted(self.rows, key=lambda r: r[0])

    def column(self, name) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([r[j] for r in self.rows], dtype=float)

    def to_csv(self, header: dict | None = None) -> str:
        return write_csv(self.columns, self.rows, {**self.meta, **(header or {})})


def write_csv(columns, rows, header: dict | None = None) -> str:
    buf = io.StringIO()
    meta = {"version": __version__, **(header or {})}
    buf.write("# " + json.dumps(to_jsonable(meta), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def save_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
