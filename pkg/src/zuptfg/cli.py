"""Command line: ``simulate``, ``run``, ``eval`` and ``compare``.

Exit codes: 0 success, 2 input or configuration error, 3 solver failure.
Errors are reported on stderr as one line ``zuptfg:error:<kind>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Sequence

from . import config, evaluation, geodesy, io, pipeline, sim
from .errors import ZuptFgError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # single-line diagnostics instead of usage dumps
        raise CliError("usage", message)


def _diag(kind: str, message: str) -> None:
    text = " ".join(str(message).split())
    print(f"zuptfg:error:{kind}: {text}", file=sys.stderr)


def _load_values(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    try:
        return config.load(path)
    except config.ConfigError as exc:
        raise CliError("config", str(exc)) from exc


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("io", f"cannot create {out}: {exc.strerror}") from exc
    return out


def cmd_simulate(args) -> int:
    values = _load_values(args.config)
    try:
        cfg = config.scenario_config(values, args.preset, args.seed)
        scenario, corrupted, log = sim.simulate(cfg, noisy=args.noisy)
    except (config.ConfigError, ValueError, ZuptFgError) as exc:
        raise CliError("config", str(exc)) from exc
    out = _out_dir(args.out)
    io.write_dataset(out / io.DATASET, scenario.records)
    io.write_truth(out / io.TRUTH, scenario.records)
    io.write_ephemeris(out / io.EPHEMERIS, scenario.constellation)
    if args.noisy:
        io.write_dataset(out / io.NOISY_DATASET, corrupted)
        io.write_corruption_log(out / io.CORRUPTION_LOG, log)
    tr = scenario.truth
    summary = {
        "preset": cfg.name,
        "seed": cfg.seed,
        "path_length_m": round(float(tr.path_length), 3),
        "stops": len(tr.stops),
        "epochs": len(scenario.records),
        "observations": scenario.observation_count,
        "corrupted": len(log or []),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(
        f"path_length_m={summary['path_length_m']} stops={summary['stops']} epochs={summary['epochs']} "
        f"observations={summary['observations']} corrupted={summary['corrupted']}"
    )
    return EXIT_OK


def _solve_dump(report) -> str:
    if report is None:
        return "no solve report"
    return (
        f"iterations={report.iterations} initial_cost={report.initial_cost!r} "
        f"final_cost={report.final_cost!r} converged={report.converged}"
    )


def cmd_run(args) -> int:
    values = _load_values(args.config)
    try:
        run_cfg = config.run_config(
            values,
            mode=args.mode,
            oracle_stops=True if args.oracle_stops else None,
            batch=True if args.batch else None,
        )
    except config.ConfigError as exc:
        raise CliError("config", str(exc)) from exc
    dataset = Path(args.dataset)
    eph_path = Path(args.ephemeris) if args.ephemeris else dataset.parent / io.EPHEMERIS
    try:
        records = io.read_dataset(dataset)
        constellation = io.read_ephemeris(eph_path)
    except io.DatasetError as exc:
        raise CliError("io", str(exc)) from exc
    try:
        result = pipeline.run(records, constellation, run_cfg)
    except pipeline.MissingProprioceptiveData as exc:
        raise CliError("input", str(exc)) from exc
    except pipeline.SolverFailure as exc:
        raise CliError("solver", f"{exc} ({_solve_dump(exc.report)})", EXIT_SOLVER) from exc
    except (KeyError, ZuptFgError, ValueError) as exc:
        raise CliError("input", str(exc).strip("'\"")) from exc
    out = _out_dir(args.out)
    traj = out / f"trajectory_{run_cfg.mode}.csv"
    io.write_trajectory(traj, result.t, result.positions, result.stationary)
    final = result.reports[-1] if result.reports else None
    diag = {
        "mode": run_cfg.mode,
        "epochs": len(result.t),
        "iterations": result.iterations,
        "final_cost": final.final_cost if final else None,
        "converged": all(r.converged for r in result.reports),
        "zupt_pairs": result.zupt_pairs,
        "yaw_offset_deg": math.degrees(result.yaw_offset),
    }
    (out / f"solve_{run_cfg.mode}.json").write_text(json.dumps(diag, indent=1) + "\n")
    print(f"mode={run_cfg.mode} epochs={diag['epochs']} iterations={diag['iterations']} trajectory={traj}")
    return EXIT_OK


def _parse_origin(text: str | None):
    if text is None:
        return None
    try:
        lat, lon, h = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise CliError("usage", "--origin expects lat_deg,lon_deg,height_m") from exc
    return geodesy.GeodeticPosition.from_degrees(lat, lon, h)


def cmd_eval(args) -> int:
    origin = _parse_origin(args.origin)
    try:
        est = io.read_trajectory(args.estimate)
        truth = io.read_trajectory(args.truth)
        series = evaluation.error_series(est, truth, origin)
        row = evaluation.metrics(series, args.label or Path(args.estimate).stem)
    except (io.DatasetError, ZuptFgError, ValueError) as exc:
        raise CliError("input", str(exc)) from exc
    out = _out_dir(args.out)
    stem = args.label or Path(args.estimate).stem
    evaluation.write_error_series(out / f"errors_{stem}.csv", series)
    evaluation.write_metrics(out / f"metrics_{stem}.csv", [row])
    print(
        f"method={row.method} rmse_e={row.rmse_e:.4f} rmse_n={row.rmse_n:.4f} rmse_u={row.rmse_u:.4f} "
        f"rmse_3d={row.rmse_3d:.4f} max_norm={row.max_norm:.4f}"
    )
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.metrics) < 2:
        raise CliError("usage", "compare needs at least two metrics files")
    rows = []
    for path in args.metrics:
        try:
            rows += evaluation.read_metrics(path)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError("input", f"{path}: {exc}") from exc
    table = evaluation.compare(rows)
    text = table.render()
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(text)
            out.with_suffix(".csv").write_text(evaluation.comparison_csv(table))
        except OSError as exc:
            raise CliError("io", f"cannot write {out}: {exc.strerror}") from exc
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zuptfg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--preset", choices=sorted(sim.PRESETS), default=None)
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--noisy", action="store_true", help="also write a multipath-corrupted copy")
    s.add_argument("--out", default="out")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="estimate a trajectory")
    r.add_argument("--dataset", required=True)
    r.add_argument("--ephemeris", help="defaults to ephemeris.json next to the dataset")
    r.add_argument("--mode", choices=pipeline.MODES, default=None)
    r.add_argument("--config")
    r.add_argument("--seed", type=int, default=None, help="accepted for symmetry; estimation is deterministic")
    r.add_argument("--oracle-stops", action="store_true", help="use ground-truth stationarity flags")
    r.add_argument("--batch", action="store_true", help="solve once after building the whole graph")
    r.add_argument("--out", default="out")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="error series and metrics against truth")
    e.add_argument("--estimate", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--origin", help="lat_deg,lon_deg,height_m; default first truth position")
    e.add_argument("--label")
    e.add_argument("--out", default="out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="table of metrics rows with column minima flagged")
    c.add_argument("metrics", nargs="*")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        _diag(exc.kind, str(exc))
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
