"""Dataset and result files: JSONL epochs, ephemeris JSON, truth, trajectory and corruption CSVs."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import gnss
from .evaluation import Trajectory
from .records import EpochRecord, ImuSample, RawObservation, TruthSample, WheelOdometrySample
from .sim import CorruptionEntry

DATASET = "dataset.jsonl"
NOISY_DATASET = "dataset_noisy.jsonl"
EPHEMERIS = "ephemeris.json"
TRUTH = "truth.csv"
CORRUPTION_LOG = "corruption_log.csv"


class DatasetError(ValueError):
    """A dataset file is missing, malformed or inconsistent."""


def _vec(v) -> list[float]:
    return [float(x) for x in v]


def record_to_json(rec: EpochRecord) -> dict:
    out = {
        "epoch": int(rec.epoch),
        "t": float(rec.t),
        "gnss": [{"sat": int(o.sat), "pr_m": float(o.pr_m), "cp_m": float(o.cp_m)} for o in rec.gnss],
        "imu": [{"t": float(s.t), "f": _vec(s.f), "w": _vec(s.w)} for s in rec.imu],
        "enc": [
            {"t": float(e.t), "v_lon": float(e.v_lon), "yaw_rate": float(e.yaw_rate), "tau": float(e.tau)}
            for e in rec.enc
        ],
    }
    if rec.truth is not None:
        out["truth"] = {
            "p_ecef": _vec(rec.truth.p_ecef),
            "v_enu": _vec(rec.truth.v_enu),
            "stationary": bool(rec.truth.stationary),
        }
    return out


def record_from_json(d: dict) -> EpochRecord:
    try:
        enc_raw = d.get("enc", [])
        # a single encoder object is accepted as well as a list
        if isinstance(enc_raw, dict):
            enc_raw = [enc_raw]
        truth = d.get("truth")
        return EpochRecord(
            epoch=int(d["epoch"]),
            t=float(d["t"]),
            gnss=[RawObservation(int(o["sat"]), float(o["pr_m"]), float(o["cp_m"])) for o in d.get("gnss", [])],
            imu=[
                ImuSample(float(s["t"]), np.array(s["f"], dtype=float), np.array(s["w"], dtype=float))
                for s in d.get("imu", [])
            ],
            enc=[
                WheelOdometrySample(
                    float(e["v_lon"]), float(e["yaw_rate"]), float(e["tau"]), float(e.get("t", d["t"]))
                )
                for e in enc_raw
            ],
            truth=None
            if truth is None
            else TruthSample(
                np.array(truth["p_ecef"], dtype=float),
                np.array(truth.get("v_enu", [0.0, 0.0, 0.0]), dtype=float),
                bool(truth.get("stationary", False)),
            ),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed epoch record: {exc}") from exc


def write_dataset(path: str | Path, records: Iterable[EpochRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec), separators=(",", ":")))
            fh.write("\n")


def read_dataset(path: str | Path) -> list[EpochRecord]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset not found: {path}")
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{n}: invalid JSON ({exc.msg})") from exc
            out.append(record_from_json(d))
    if not out:
        raise DatasetError(f"{path}: no epochs")
    return out


def write_ephemeris(path: str | Path, constellation: Sequence[gnss.SatelliteEphemeris]) -> None:
    Path(path).write_text(json.dumps([asdict(e) for e in constellation], indent=1) + "\n")


def read_ephemeris(path: str | Path) -> list[gnss.SatelliteEphemeris]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"ephemeris not found: {path}")
    try:
        return [gnss.SatelliteEphemeris(**e) for e in json.loads(path.read_text())]
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: malformed ephemeris ({exc})") from exc


def _write_positions(path: str | Path, t: Sequence[float], positions: np.ndarray, extra=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["epoch", "t", "x", "y", "z"]
        if extra is not None:
            header.append(extra[0])
        w.writerow(header)
        for k, (tk, p) in enumerate(zip(t, positions)):
            row = [k, repr(float(tk))] + [repr(float(c)) for c in p]
            if extra is not None:
                row.append(int(extra[1][k]))
            w.writerow(row)


def _read_positions(path: str | Path) -> tuple[Trajectory, list[dict]]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not {"t", "x", "y", "z"} <= set(reader.fieldnames or ()):
            raise DatasetError(f"{path}: expected columns t,x,y,z")
        rows = list(reader)
    try:
        t = np.array([float(r["t"]) for r in rows])
        p = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]).reshape(-1, 3)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    return Trajectory(t, p), rows


def write_truth(path: str | Path, records: Sequence[EpochRecord]) -> None:
    if any(r.truth is None for r in records):
        raise DatasetError("records carry no truth")
    _write_positions(
        path,
        [r.t for r in records],
        np.array([r.truth.p_ecef for r in records]),
        ("stationary", [r.truth.stationary for r in records]),
    )


def read_trajectory(path: str | Path) -> Trajectory:
    return _read_positions(path)[0]


def truth_from_records(records: Sequence[EpochRecord]) -> Trajectory:
    if any(r.truth is None for r in records):
        raise DatasetError("records carry no truth")
    return Trajectory([r.t for r in records], np.array([r.truth.p_ecef for r in records]))


def write_trajectory(path: str | Path, t: Sequence[float], positions: np.ndarray, stationary=None) -> None:
    _write_positions(path, t, positions, None if stationary is None else ("stationary", stationary))


def write_corruption_log(path: str | Path, log: Sequence[CorruptionEntry]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "sat", "elevation_deg", "range_error_m", "phase_error_m"])
        for e in log:
            w.writerow(
                [
                    e.epoch,
                    e.sat,
                    repr(float(np.degrees(e.elevation))),
                    repr(float(e.range_error)),
                    repr(float(e.phase_error)),
                ]
            )


def read_corruption_log(path: str | Path) -> list[CorruptionEntry]:
    with open(path, newline="") as fh:
        return [
            CorruptionEntry(
                int(r["epoch"]),
                int(r["sat"]),
                float(np.radians(float(r["elevation_deg"]))),
                float(r["range_error_m"]),
                float(r["phase_error_m"]),
            )
            for r in csv.DictReader(fh)
        ]
