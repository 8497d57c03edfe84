"""Trajectory error series, summary metrics and method comparison tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import geodesy
from .errors import EmptySeries, EpochMismatch, NonFiniteInput

METRIC_COLUMNS = ("rmse_e", "rmse_n", "rmse_u", "rmse_3d", "max_norm")
TABLE_HEADER = ("method", "E", "N", "U", "3D", "MaxNorm")


@dataclass(frozen=True)
class Trajectory:
    """ECEF positions at epoch times."""

    t: np.ndarray
    positions: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=float).reshape(-1)
        p = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(t) != len(p):
            raise EpochMismatch(f"{len(t)} times but {len(p)} positions")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "positions", p)

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True)
class ErrorSeries:
    t: np.ndarray
    enu: np.ndarray  # (n, 3): east, north, up

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True)
class MetricsRow:
    method: str
    rmse_e: float
    rmse_n: float
    rmse_u: float
    rmse_3d: float
    max_norm: float

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, c) for c in METRIC_COLUMNS)


@dataclass(frozen=True)
class Comparison:
    rows: list[MetricsRow]
    best: list[tuple[bool, ...]]  # per row, one flag per metric column

    def render(self, precision: int = 3) -> str:
        widths = [max(len(TABLE_HEADER[0]), *(len(r.method) for r in self.rows))]
        cells = []
        for row, flags in zip(self.rows, self.best):
            line = [row.method]
            for v, b in zip(row.values(), flags):
                line.append(f"{v:.{precision}f}{'*' if b else ''}")
            cells.append(line)
        for c in range(1, len(TABLE_HEADER)):
            widths.append(max(len(TABLE_HEADER[c]), *(len(line[c]) for line in cells)))

        def fmt(line) -> str:
            return "  ".join(s.ljust(w) if i == 0 else s.rjust(w) for i, (s, w) in enumerate(zip(line, widths)))

        out = [fmt(TABLE_HEADER), fmt(["-" * w for w in widths])]
        out += [fmt(line) for line in cells]
        out.append("* best in column")
        return "\n".join(out) + "\n"


def error_series(estimate: Trajectory, truth: Trajectory, origin: geodesy.GeodeticPosition | None = None) -> ErrorSeries:
    """Per-epoch ENU difference ``estimate - truth`` at a fixed origin.

    The origin defaults to the first truth position. Timestamps must match
    exactly; there is no interpolation.
    """
    if len(estimate) != len(truth) or not np.array_equal(estimate.t, truth.t):
        raise EpochMismatch("estimate and truth epochs differ")
    if len(truth) == 0:
        raise EmptySeries("no epochs")
    if not (np.all(np.isfinite(estimate.positions)) and np.all(np.isfinite(truth.positions))):
        raise NonFiniteInput("non-finite positions")
    origin = origin or geodesy.ecef_to_geodetic(truth.positions[0])
    rot = geodesy.rotation_ecef_to_enu(origin)
    enu = (estimate.positions - truth.positions) @ rot.T
    return ErrorSeries(truth.t.copy(), enu)


def metrics(series: ErrorSeries, method: str = "") -> MetricsRow:
    e = np.asarray(series.enu, dtype=float).reshape(-1, 3)
    if len(e) == 0:
        raise EmptySeries("cannot summarise an empty error series")
    sq = e * e
    axis = np.sqrt(sq.mean(axis=0))
    norms = np.sqrt(sq.sum(axis=1))
    return MetricsRow(
        method,
        float(axis[0]),
        float(axis[1]),
        float(axis[2]),
        float(np.sqrt(sq.sum(axis=1).mean())),
        float(norms.max()),
    )


def compare(rows: Sequence[MetricsRow], rel_tol: float = 1e-12) -> Comparison:
    """Flag the minimum of every metric column; ties are flagged together."""
    rows = list(rows)
    if len(rows) < 2:
        raise ValueError("comparison needs at least two rows")
    vals = np.array([r.values() for r in rows])
    mins = vals.min(axis=0)
    flags = vals <= mins + rel_tol * np.maximum(np.abs(mins), 1e-300)
    return Comparison(rows, [tuple(bool(x) for x in f) for f in flags])


# --- CSV ---------------------------------------------------------------------


def write_error_series(path: str | Path, series: ErrorSeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "e_east", "e_north", "e_up"])
        for t, (e, n, u) in zip(series.t, series.enu):
            w.writerow([repr(float(t)), repr(float(e)), repr(float(n)), repr(float(u))])


def read_error_series(path: str | Path) -> ErrorSeries:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    t = np.array([float(r["t"]) for r in rows])
    enu = np.array([[float(r["e_east"]), float(r["e_north"]), float(r["e_up"])] for r in rows]).reshape(-1, 3)
    return ErrorSeries(t, enu)


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method",) + METRIC_COLUMNS)
    for r in rows:
        w.writerow([r.method] + [repr(v) for v in r.values()])
    return buf.getvalue()


def write_metrics(path: str | Path, rows: Sequence[MetricsRow]) -> None:
    Path(path).write_text(metrics_csv(rows))


def read_metrics(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(("method",) + METRIC_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [MetricsRow(r["method"], *(float(r[c]) for c in METRIC_COLUMNS)) for r in reader]


def comparison_csv(table: Comparison) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER + tuple(f"best_{h}" for h in TABLE_HEADER[1:]))
    for r, flags in zip(table.rows, table.best):
        w.writerow([r.method] + [repr(v) for v in r.values()] + [int(b) for b in flags])
    return buf.getvalue()
