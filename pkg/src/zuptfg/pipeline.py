"""Graph construction and incremental solving for the L2, L2-ZUPT and L2-CN estimators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import corenav, factors, geodesy, gnss
from .errors import BelowHorizon, NearSingularInput, ZuptFgError
from .graph import FactorGraph, SolveReport, clock_key, phase_key, position_key, tropo_key
from .records import EpochRecord

MODES = ("l2", "l2-zupt", "l2-cn")


class MissingProprioceptiveData(ZuptFgError, ValueError):
    pass


class SolverFailure(ZuptFgError, RuntimeError):
    def __init__(self, message: str, report: SolveReport | None = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class RunConfig:
    mode: str = "l2"
    zupt_sigma: float = factors.ZUPT_SIGMA
    process_sigma: float = factors.PROCESS_SIGMA
    pseudorange_sigma: float = factors.PSEUDORANGE_SIGMA
    phase_sigma: float = factors.PHASE_SIGMA
    tropo_walk: float = factors.TROPO_WALK_SIGMA
    clock_walk: float = factors.CLOCK_WALK_SIGMA
    phase_walk: float = factors.PHASE_WALK_SIGMA
    prior_position_sigma: float = 10.0
    prior_clock_sigma: float = 100.0
    prior_tropo_mean: float = 2.4
    prior_tropo_sigma: float = 0.5
    prior_phase_sigma: float = 10.0
    relinearize_threshold: float = 1.0
    max_iterations: int = 100
    batch: bool = False
    oracle_stops: bool = False
    alignment_distance: float = 30.0
    corenav: corenav.CoreNavConfig = field(default_factory=corenav.CoreNavConfig)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class RunResult:
    mode: str
    t: np.ndarray
    positions: np.ndarray
    stationary: list[bool]
    reports: list[SolveReport]
    yaw_offset: float = 0.0
    zupt_pairs: int = 0
    graph: FactorGraph | None = None
    # estimate of each epoch right after its own solve, before later epochs arrive
    online: np.ndarray | None = None

    @property
    def iterations(self) -> int:
        return sum(r.iterations for r in self.reports)


def satellite_table(records: Sequence[EpochRecord], constellation: Sequence[gnss.SatelliteEphemeris]):
    ephs = {e.sat: e for e in constellation}
    table = []
    for r in records:
        row = {}
        for ob in r.gnss:
            if ob.sat not in ephs:
                raise KeyError(f"no ephemeris for satellite {ob.sat}")
            row[ob.sat] = gnss.satellite_position(ephs[ob.sat], r.t)
        table.append(row)
    return table


def _initial_guess(sats: dict[int, np.ndarray]) -> np.ndarray:
    mean = np.mean(list(sats.values()), axis=0)
    return geodesy.WGS84_A * mean / np.linalg.norm(mean)


def least_squares_fix(
    rec: EpochRecord,
    sats: dict[int, np.ndarray],
    tropo: float = 2.4,
    guess: np.ndarray | None = None,
    observed: dict[int, float] | None = None,
    clock: float = 0.0,
) -> tuple[np.ndarray, float]:
    """Position and clock with a fixed zenith delay.

    Uses the pseudoranges unless ``observed`` supplies bias-free ranges per
    satellite, such as carrier phase minus a known phase bias.
    """
    z_by_sat = observed if observed is not None else {ob.sat: ob.pr_m for ob in rec.gnss}
    ids = [s for s in sorted(z_by_sat) if s in sats]
    if len(ids) < 4:
        raise NearSingularInput(f"epoch {rec.epoch}: fewer than four ranges")
    p = np.array(guess, dtype=float) if guess is not None else _initial_guess(sats)
    clk = float(clock)
    z = np.array([z_by_sat[s] for s in ids])
    sp = np.array([sats[s] for s in ids])
    for _ in range(20):
        los = sp - p
        rho = np.linalg.norm(los, axis=1)
        e = los / rho[:, None]
        up = geodesy.rotation_ecef_to_enu(geodesy.ecef_to_geodetic(p))[2]
        sin_el = np.clip(e @ up, 0.05, 1.0)
        pred = rho + clk + tropo / sin_el
        A = np.column_stack([-e, np.ones(len(z))])
        dx, *_ = np.linalg.lstsq(A, z - pred, rcond=None)
        p = p + dx[:3]
        clk += dx[3]
        if np.linalg.norm(dx) < 1e-6:
            break
    return p, float(clk)


def _tdcp_displacement(rec0, rec, sats0, sats, p0, pk_guess):
    """Receiver displacement from time-differenced carrier phase (biases cancel)."""
    cp0 = {ob.sat: ob.cp_m for ob in rec0.gnss}
    common = [ob for ob in rec.gnss if ob.sat in cp0]
    if len(common) < 5:
        return None
    p = np.array(pk_guess, dtype=float)
    dclk = 0.0
    ids = [ob.sat for ob in common]
    d = np.array([ob.cp_m - cp0[ob.sat] for ob in common])
    rho0 = np.array([np.linalg.norm(sats0[s] - p0) for s in ids])
    spk = np.array([sats[s] for s in ids])
    for _ in range(10):
        los = spk - p
        rho = np.linalg.norm(los, axis=1)
        e = los / rho[:, None]
        pred = rho - rho0 + dclk
        A = np.column_stack([-e, np.ones(len(ids))])
        dx, *_ = np.linalg.lstsq(A, d - pred, rcond=None)
        p = p + dx[:3]
        dclk += dx[3]
        if np.linalg.norm(dx) < 1e-8:
            break
    return p - p0


def estimate_yaw_offset(
    records: Sequence[EpochRecord],
    sat_table,
    fixes: Sequence[np.ndarray],
    cn_epochs: Sequence[corenav.CoreNavEpoch],
    origin: geodesy.GeodeticPosition,
    distance: float = 30.0,
) -> float:
    """Rotation about up that maps the filter's ENU displacements onto GNSS ones.

    Uses carrier-phase displacements from the first epoch over the first
    ``distance`` metres of travel.
    """
    rot = geodesy.rotation_ecef_to_enu(origin)
    p0 = fixes[0]
    cross = dot = 0.0
    for k in range(1, len(records)):
        d_ins = cn_epochs[k].position - cn_epochs[0].position
        dist = math.hypot(d_ins[0], d_ins[1])
        if dist < 2.0:
            continue
        if dist > distance:
            break
        d = _tdcp_displacement(records[0], records[k], sat_table[0], sat_table[k], p0, fixes[k])
        if d is None:
            continue
        g = rot @ d
        cross += d_ins[0] * g[1] - d_ins[1] * g[0]
        dot += d_ins[0] * g[0] + d_ins[1] * g[1]
    if cross == 0.0 and dot == 0.0:
        return 0.0
    return math.atan2(cross, dot)


def _has_proprioceptive(records: Sequence[EpochRecord]) -> bool:
    return any(r.imu for r in records) and any(r.enc for r in records)


class GraphBuilder:
    """Adds one epoch at a time to a factor graph according to the run mode."""

    def __init__(self, cfg: RunConfig, sat_table, fixes, stationary, cn_deltas=None, origin=None):
        self.cfg = cfg
        self.sat_table = sat_table
        self.fixes = fixes
        self.stationary = stationary
        self.cn_deltas = cn_deltas
        self.graph = FactorGraph(relinearize_threshold=cfg.relinearize_threshold)
        self.sats_seen: list[int] = []
        self.zupt_pairs = 0

    def _gnss_factors(self, k: int, rec: EpochRecord) -> list:
        cfg = self.cfg
        out = []
        fix = self.fixes[k][0]
        for ob in rec.gnss:
            sp = self.sat_table[k][ob.sat]
            el = gnss.elevation_angle(sp, fix)
            if el <= gnss.ELEVATION_MASK:
                continue
            pr = factors.GnssFactorSpec(
                k, ob.sat, ob.pr_m, factors.elevation_weighted_variance(cfg.pseudorange_sigma, el), sp, fix
            )
            cp = factors.GnssFactorSpec(
                k, ob.sat, ob.cp_m, factors.elevation_weighted_variance(cfg.phase_sigma, el), sp, fix
            )
            try:
                out.append(factors.make_gnss_observation(pr, cp, gnss.RangeModel(sp)))
            except BelowHorizon:
                continue
        return out

    def _phase_start(self, k: int, rec: EpochRecord, prev: int, fix: np.ndarray, clk: float):
        """Warm start from carrier phase with the previous epoch's biases; keeps the solver near the optimum."""
        g = self.graph
        ranges = {
            ob.sat: ob.cp_m - float(g.value(phase_key(prev, ob.sat))[0]) for ob in rec.gnss if ob.sat in self.sats_seen
        }
        if len(ranges) < 4:
            return fix, clk
        tropo = float(g.value(tropo_key(prev))[0])
        guess = g.value(position_key(prev))
        try:
            p, c = least_squares_fix(
                rec, self.sat_table[k], tropo, guess, ranges, float(g.value(clock_key(prev))[0])
            )
        except NearSingularInput:
            return fix, clk
        if not np.all(np.isfinite(p)) or np.linalg.norm(p - fix) > 100.0:
            return fix, clk
        return p, c

    def epoch(self, k: int, rec: EpochRecord):
        cfg = self.cfg
        g = self.graph
        fix, clk = self.fixes[k]
        obs = {ob.sat: ob for ob in rec.gnss}
        new_sats = [s for s in sorted(obs) if s not in self.sats_seen]
        variables = []
        fs = []
        if k == 0:
            variables += [(position_key(0), fix), (tropo_key(0), [cfg.prior_tropo_mean]), (clock_key(0), [clk])]
            fs += [
                factors.make_prior(factors.PriorFactorSpec(position_key(0), fix, cfg.prior_position_sigma**2)),
                factors.make_prior(
                    factors.PriorFactorSpec(tropo_key(0), [cfg.prior_tropo_mean], cfg.prior_tropo_sigma**2)
                ),
                factors.make_prior(factors.PriorFactorSpec(clock_key(0), [clk], cfg.prior_clock_sigma**2)),
            ]
        else:
            prev = k - 1
            p_prev = g.value(position_key(prev))
            fix, clk = self._phase_start(k, rec, prev, fix, clk)
            linked = False
            if cfg.mode == "l2-cn":
                delta, cov = self.cn_deltas[k]
                p_init = p_prev + delta
                fs.append(factors.make_corenav_between(delta, cov, prev, k))
            elif cfg.mode == "l2-zupt" and self.stationary[prev] and self.stationary[k]:
                p_init = p_prev
                fs.append(
                    factors.make_zupt(
                        factors.ZuptFactorSpec(
                            prev,
                            k,
                            (True, True),
                            cfg.zupt_sigma,
                            "ground-truth" if cfg.oracle_stops else "detected",
                        )
                    )
                )
                self.zupt_pairs += 1
                linked = True
            else:
                p_init = fix
            if cfg.mode != "l2-cn" and not linked:
                fs.append(factors.make_process_between(prev, k, cfg.process_sigma))
            variables += [
                (position_key(k), p_init),
                (tropo_key(k), g.value(tropo_key(prev))),
                (clock_key(k), [clk]),
            ]
            variables += [(phase_key(k, s), g.value(phase_key(prev, s))) for s in self.sats_seen]
            fs.append(factors.make_epoch_walk(prev, cfg.tropo_walk, cfg.clock_walk, cfg.phase_walk, self.sats_seen))
        for s in new_sats:
            b0 = obs[s].cp_m - obs[s].pr_m
            variables.append((phase_key(k, s), [b0]))
            fs.append(factors.make_prior(factors.PriorFactorSpec(phase_key(k, s), [b0], cfg.prior_phase_sigma**2)))
        self.sats_seen.extend(new_sats)
        fs += self._gnss_factors(k, rec)
        return variables, fs


def run(
    records: Sequence[EpochRecord],
    constellation: Sequence[gnss.SatelliteEphemeris],
    cfg: RunConfig | None = None,
) -> RunResult:
    cfg = cfg or RunConfig()
    if not records:
        raise NearSingularInput("empty dataset")
    if cfg.mode == "l2-cn" and not _has_proprioceptive(records):
        raise MissingProprioceptiveData("missing proprioceptive data: l2-cn needs IMU and encoder blocks")
    table = satellite_table(records, constellation)
    fixes = []
    guess = None
    for rec, sats in zip(records, table):
        p, clk = least_squares_fix(rec, sats, cfg.prior_tropo_mean, guess)
        fixes.append((p, clk))
        guess = p
    origin = geodesy.ecef_to_geodetic(fixes[0][0])

    stationary = [False] * len(records)
    cn_deltas = None
    yaw = 0.0
    if cfg.mode == "l2-zupt":
        if cfg.oracle_stops:
            stationary = [bool(r.truth.stationary) if r.truth is not None else False for r in records]
        elif any(r.imu for r in records):
            stationary = corenav.stationary_flags(records, cfg.corenav)
    elif cfg.mode == "l2-cn":
        cn_cfg = replace(cfg.corenav, oracle_stops=cfg.oracle_stops)
        result = corenav.run_corenav(records, cn_cfg, origin)
        yaw = estimate_yaw_offset(
            records, table, [f[0] for f in fixes], result.epochs, origin, cfg.alignment_distance
        )
        epochs = corenav.rotate_about_up(result.epochs, yaw)
        rot = geodesy.rotation_ecef_to_enu(origin)
        cn_deltas = [(rot.T @ e.delta, rot.T @ e.covariance @ rot) for e in epochs]
        stationary = [e.stationary for e in epochs]

    builder = GraphBuilder(cfg, table, fixes, stationary, cn_deltas, origin)
    reports: list[SolveReport] = []
    online: list[np.ndarray] = []
    try:
        if cfg.batch:
            for k, rec in enumerate(records):
                v, f = builder.epoch(k, rec)
                builder.graph.extend(v, f)
            reports.append(builder.graph.optimize(cfg.max_iterations))
        else:
            for k, rec in enumerate(records):
                v, f = builder.epoch(k, rec)
                reports.append(builder.graph.extend_and_solve(v, f, cfg.max_iterations))
                online.append(builder.graph.value(position_key(k)))
        reports.append(builder.graph.refine(cfg.max_iterations))
    except ArithmeticError as exc:
        raise SolverFailure(str(exc), reports[-1] if reports else None) from exc
    g = builder.graph
    positions = np.array([g.value(position_key(k)) for k in range(len(records))])
    return RunResult(
        cfg.mode,
        np.array([r.t for r in records]),
        positions,
        stationary,
        reports,
        yaw,
        builder.zupt_pairs,
        g,
        np.array(online) if online else positions.copy(),
    )
