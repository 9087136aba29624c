"""Per-iteration run log and its CSV form.

CSV columns, in order::

    k, x_next, alloc_total, h, pi, B, A, xhat, y_hat, v_true

Coordinates and level lists are joined with ``;``. ``h`` is the 1-based index
of the guiding level; ``pi`` lists the quantile levels in the model.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

CSV_COLUMNS = ("k", "x_next", "alloc_total", "h", "pi", "B", "A", "xhat", "y_hat", "v_true")


def _fmt(v) -> str:
    return repr(float(v))


def _join(vals) -> str:
    return ";".join(_fmt(v) for v in np.atleast_1d(vals))


def _split(s: str) -> list:
    return [float(t) for t in s.split(";")] if s else []


@dataclass
class TraceRow:
    k: int
    x_next: Optional[list]
    alloc: dict
    h: int
    pi: list
    B: int
    A: int
    xhat: list
    y_hat: float
    v_true: float
    flags: list = field(default_factory=list)

    @property
    def alloc_total(self) -> int:
        return int(sum(self.alloc.values()))

    def csv_fields(self) -> list:
        return [
            str(self.k),
            "" if self.x_next is None else _join(self.x_next),
            str(self.alloc_total),
            str(self.h),
            _join(self.pi),
            str(self.B),
            str(self.A),
            _join(self.xhat),
            _fmt(self.y_hat),
            _fmt(self.v_true),
        ]


@dataclass
class RunTrace:
    """Header plus one row per completed iteration.

    ``header`` carries the config hash, seed, problem id, the initial design
    and its cumulative evaluation count.
    """

    header: dict
    rows: list = field(default_factory=list)

    def eval_counts(self) -> np.ndarray:
        """Cumulative simulator evaluations after each row."""
        T = self.header["T"]
        return np.array([T - r.A for r in self.rows], dtype=int)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(r.csv_fields())
        return buf.getvalue()

    def write(self, csv_path: Path, json_path: Optional[Path] = None) -> None:
        Path(csv_path).write_text(self.to_csv())
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    def to_dict(self) -> dict:
        return {
            "header": self.header,
            "rows": [
                {"k": r.k, "x_next": r.x_next, "alloc": {str(k): v for k, v in sorted(r.alloc.items())},
                 "h": r.h, "pi": r.pi, "B": r.B, "A": r.A, "xhat": r.xhat, "y_hat": r.y_hat,
                 "v_true": r.v_true, "flags": r.flags}
                for r in self.rows
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunTrace":
        rows = [TraceRow(r["k"], r["x_next"], {int(k): v for k, v in r["alloc"].items()}, r["h"],
                         r["pi"], r["B"], r["A"], r["xhat"], r["y_hat"], r["v_true"], r.get("flags", []))
                for r in d["rows"]]
        return cls(d["header"], rows)


def read_trace_csv(path) -> list:
    """Rows of a trace CSV as dicts with parsed values."""
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append({
                "k": int(rec["k"]),
                "x_next": _split(rec["x_next"]),
                "alloc_total": int(rec["alloc_total"]),
                "h": int(rec["h"]),
                "pi": _split(rec["pi"]),
                "B": int(rec["B"]),
                "A": int(rec["A"]),
                "xhat": _split(rec["xhat"]),
                "y_hat": float(rec["y_hat"]),
                "v_true": float(rec["v_true"]),
            })
    return out
