"""Deterministic synthetic field tests: path, stop schedule, sensors and multipath.

The rear axle follows a polyline whose corners are replaced by tangent arcs,
on flat ground, with a trapezoidal speed profile between scheduled stops. IMU
samples are interval averages (delta-velocity / delta-angle divided by the
interval) so a noise-free strapdown integration reproduces the truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import geodesy, gnss
from .errors import InfeasibleSchedule
from .records import EpochRecord, ImuSample, RawObservation, TruthSample, WheelOdometrySample

DEFAULT_SITE = geodesy.GeodeticPosition.from_degrees(39.7334, -79.9014, 290.0)
LEVER_ARM = np.array([0.0, 0.0, 0.25])

DEG_PER_HR = math.pi / 180.0 / 3600.0


@dataclass(frozen=True)
class SensorNoise:
    """Simulated sensor errors. Densities are per sqrt(s); sample sigmas are per sample."""

    vrw: float = 0.008 / 60.0  # m/s/sqrt(s)
    arw: float = math.radians(0.12) / 60.0  # rad/sqrt(s)
    accel_bias: float = 3.6e-6 * 9.80665  # m/s^2, turn-on sigma
    gyro_bias: float = 0.8 * DEG_PER_HR  # rad/s, turn-on sigma
    accel_bias_walk: float = 1e-6  # m/s^2/sqrt(s)
    gyro_bias_walk: float = 1e-7  # rad/s/sqrt(s)
    vibration_accel: float = 0.2  # m/s^2 per sample while moving
    vibration_gyro: float = 0.003  # rad/s per sample while moving
    encoder_speed: float = 0.02  # m/s per sample while moving
    encoder_yaw_rate: float = 0.005  # rad/s per sample while moving
    pseudorange: float = 1.0  # m at zenith, scaled by 1/sin(el)
    carrier_phase: float = 0.005  # m at zenith, scaled by 1/sin(el)
    clock_walk: float = 1.0  # m per epoch
    tropo_walk: float = 0.002  # m per epoch

    @classmethod
    def zero(cls) -> SensorNoise:
        return cls(**{k: 0.0 for k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class ScenarioConfig:
    """A drive along ``waypoints`` (rear-axle ENU metres) with stops.

    ``stops`` lists (start, duration) in seconds. When it is ``None``,
    ``n_stops`` stops of ``stop_duration`` are spread evenly over the path at
    ``cruise_speed``.
    """

    waypoints: tuple[tuple[float, float], ...]
    name: str = "custom"
    cruise_speed: float = 1.2
    max_accel: float = 0.5
    corner_radius: float = 3.0
    n_stops: int = 0
    stop_duration: float = 10.0
    stops: tuple[tuple[float, float], ...] | None = None
    idle_start: float = 10.0
    idle_end: float = 10.0
    duration: float | None = None
    imu_rate: int = 100
    encoder_rate: int = 10
    gnss_rate: int = 1
    site: geodesy.GeodeticPosition = DEFAULT_SITE
    noise: SensorNoise = field(default_factory=SensorNoise)
    multipath_fraction: float = 0.02
    multipath: gnss.MultipathModel = field(default_factory=gnss.MultipathModel)
    tropo_zenith: float = 2.3
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.multipath_fraction <= 1.0:
            raise ValueError("multipath fraction must be in [0, 1]")
        if self.imu_rate % self.gnss_rate or self.imu_rate % self.encoder_rate:
            raise ValueError("IMU rate must be a multiple of the encoder and GNSS rates")


PRESETS = {"test1": (671.0, 9), "test2": (652.0, 19), "test3": (663.0, 20)}


def rectangle_waypoints(length: float, width: float = 100.0, radius: float = 3.0, rotation: float = 0.0):
    """Closed rounded rectangle of total length ``length`` starting mid-way along the first side."""
    height = 0.5 * (length + (8.0 - 2.0 * math.pi) * radius) - width
    if height <= 2.0 * radius:
        raise InfeasibleSchedule("loop too short for the requested width")
    pts = [(width / 2, 0.0), (width, 0.0), (width, height), (0.0, height), (0.0, 0.0), (width / 2, 0.0)]
    c, s = math.cos(rotation), math.sin(rotation)
    ox, oy = width / 2, 0.0
    return tuple(((x - ox) * c - (y - oy) * s, (x - ox) * s + (y - oy) * c) for x, y in pts)


def preset(name: str, seed: int = 0, **overrides) -> ScenarioConfig:
    key = name.replace("-like", "")
    if key not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    length, stops = PRESETS[key]
    radius = overrides.get("corner_radius", 3.0)
    wps = rectangle_waypoints(length, radius=radius, rotation=math.radians(25.0))
    overrides.setdefault("n_stops", stops)
    return ScenarioConfig(waypoints=wps, name=key, seed=seed, **overrides)


# --- path geometry -------------------------------------------------------------


@dataclass(frozen=True)
class _Piece:
    s0: float
    length: float
    start: np.ndarray
    heading0: float
    curvature: float


class Path:
    """Arc-length parameterised polyline with tangent-arc corners."""

    def __init__(self, waypoints: Sequence[Sequence[float]], radius: float):
        pts = [np.asarray(p, dtype=float) for p in waypoints]
        self.pieces: list[_Piece] = []
        self.origin = pts[0] if pts else np.zeros(2)
        if len(pts) < 2:
            self.length = 0.0
            self.heading0 = 0.0
            return
        dirs = []
        lens = []
        for a, b in zip(pts[:-1], pts[1:]):
            d = b - a
            n = float(np.hypot(*d))
            if n <= 0:
                raise InfeasibleSchedule("repeated waypoint")
            dirs.append(d / n)
            lens.append(n)
        turns = []
        cuts = [0.0] * (len(pts))
        for i in range(1, len(pts) - 1):
            d0, d1 = dirs[i - 1], dirs[i]
            ang = math.atan2(d0[0] * d1[1] - d0[1] * d1[0], float(d0 @ d1))
            turns.append(ang)
            cuts[i] = radius * math.tan(abs(ang) / 2.0)
        s = 0.0
        for i in range(len(dirs)):
            straight = lens[i] - cuts[i] - cuts[i + 1]
            if straight < -1e-9:
                raise InfeasibleSchedule("segment too short for the corner radius")
            h = math.atan2(dirs[i][1], dirs[i][0])
            start = pts[i] + dirs[i] * cuts[i]
            if straight > 0:
                self.pieces.append(_Piece(s, straight, start, h, 0.0))
                s += straight
            if i < len(turns) and abs(turns[i]) > 1e-12:
                arc = radius * abs(turns[i])
                kappa = math.copysign(1.0 / radius, turns[i])
                self.pieces.append(_Piece(s, arc, start + dirs[i] * max(straight, 0.0), h, kappa))
                s += arc
        self.length = s
        self.heading0 = self.pieces[0].heading0
        self._starts = [p.s0 for p in self.pieces]

    def evaluate(self, s: np.ndarray):
        """Position (2-D), unwrapped heading and curvature at arc lengths ``s``."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        pos = np.tile(self.origin, (s.size, 1)).astype(float)
        heading = np.full(s.size, self.heading0)
        kappa = np.zeros(s.size)
        if not self.pieces:
            return pos, heading, kappa
        idx = np.clip(np.searchsorted(self._starts, s, side="right") - 1, 0, len(self.pieces) - 1)
        turned = np.cumsum([0.0] + [p.curvature * p.length for p in self.pieces])
        for i, p in enumerate(self.pieces):
            m = idx == i
            if not m.any():
                continue
            u = s[m] - p.s0
            h0 = p.heading0
            if p.curvature == 0.0:
                pos[m] = p.start + np.outer(u, [math.cos(h0), math.sin(h0)])
                heading[m] = self.heading0 + turned[i]
            else:
                k = p.curvature
                h = h0 + k * u
                pos[m, 0] = p.start[0] + (np.sin(h) - math.sin(h0)) / k
                pos[m, 1] = p.start[1] - (np.cos(h) - math.cos(h0)) / k
                heading[m] = self.heading0 + turned[i] + k * u
                kappa[m] = k
        return pos, heading, kappa


# --- speed profile ---------------------------------------------------------------


@dataclass(frozen=True)
class SpeedProfile:
    """Piecewise trapezoidal legs at a common cruise speed."""

    legs: tuple[tuple[float, float], ...]  # (start time, duration)
    cruise: float
    accel: float
    duration: float

    def _leg_distance(self, T: float) -> float:
        return self.cruise * (T - self.cruise / self.accel)

    def evaluate(self, t: np.ndarray):
        """Arc length, speed and along-track acceleration at times ``t``."""
        t = np.asarray(t, dtype=float)
        s = np.zeros(t.size)
        v = np.zeros(t.size)
        a = np.zeros(t.size)
        vc, acc = self.cruise, self.accel
        ta = vc / acc if acc > 0 else 0.0
        eps = 1e-9  # sample times that round onto a leg boundary count as stopped
        for t0, T in self.legs:
            before = t >= t0 + T - eps
            s[before] += self._leg_distance(T)
            m = (t > t0 + eps) & (t < t0 + T - eps)
            u = t[m] - t0
            up = u < ta
            down = u > T - ta
            mid = ~(up | down)
            si = np.empty(u.size)
            vi = np.empty(u.size)
            ai = np.zeros(u.size)
            si[up] = 0.5 * acc * u[up] ** 2
            vi[up] = acc * u[up]
            ai[up] = acc
            si[mid] = 0.5 * acc * ta**2 + vc * (u[mid] - ta)
            vi[mid] = vc
            r = T - u[down]
            si[down] = self._leg_distance(T) - 0.5 * acc * r**2
            vi[down] = acc * r
            ai[down] = -acc
            s[m] += si
            v[m] = vi
            a[m] = ai
        return s, v, a


def build_schedule(cfg: ScenarioConfig, length: float) -> tuple[SpeedProfile, list[tuple[float, float]]]:
    vc, acc = cfg.cruise_speed, cfg.max_accel
    if length <= 0:
        duration = cfg.duration if cfg.duration is not None else cfg.idle_start + cfg.idle_end
        return SpeedProfile((), 0.0, acc, duration), []
    if cfg.stops is None:
        n = cfg.n_stops
        t_leg = length / (vc * (n + 1)) + vc / acc
        stops = []
        t = cfg.idle_start
        for _ in range(n):
            t += t_leg
            stops.append((t, cfg.stop_duration))
            t += cfg.stop_duration
        duration = t + t_leg + cfg.idle_end
        if cfg.duration is not None and cfg.duration < duration - 1e-9:
            raise InfeasibleSchedule(f"duration {cfg.duration} s is shorter than the required {duration:.1f} s")
        if cfg.duration is not None:
            duration = cfg.duration
    else:
        if cfg.duration is None:
            raise InfeasibleSchedule("an explicit stop schedule needs an explicit duration")
        stops = sorted((float(a), float(b)) for a, b in cfg.stops)
        duration = cfg.duration
    motion_end = duration - cfg.idle_end
    edges = [cfg.idle_start]
    for start, dur in stops:
        if dur <= 0:
            raise InfeasibleSchedule("stop durations must be positive")
        if start < edges[-1] - 1e-9:
            raise InfeasibleSchedule("stops overlap or start before motion begins")
        edges += [start, start + dur]
    edges.append(motion_end)
    if edges[-1] < edges[-2] - 1e-9:
        raise InfeasibleSchedule("stops extend beyond the end of motion")
    legs = [(edges[i], edges[i + 1] - edges[i]) for i in range(0, len(edges), 2)]
    total = sum(T for _, T in legs)
    n = len(legs)
    # n v^2 / a - v * total + length = 0, smaller root
    disc = total**2 - 4.0 * n * length / acc
    if disc < 0:
        raise InfeasibleSchedule("not enough driving time to cover the path")
    v = (total - math.sqrt(disc)) / (2.0 * n / acc)
    if v > 1.5 * vc:
        raise InfeasibleSchedule(f"schedule needs cruise speed {v:.2f} m/s")
    for _, T in legs:
        if T < 2.0 * v / acc - 1e-9:
            raise InfeasibleSchedule("a leg is too short to reach cruise speed")
    return SpeedProfile(tuple(legs), v, acc, duration), stops


# --- truth -----------------------------------------------------------------------


@dataclass
class Trajectory:
    """Ground truth sampled at the IMU rate (body point, ENU at ``site``)."""

    t: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    yaw: np.ndarray
    yaw_rate: np.ndarray
    speed: np.ndarray
    arc_length: np.ndarray
    stationary: np.ndarray
    site: geodesy.GeodeticPosition
    stops: list[tuple[float, float]]
    path_length: float

    def ecef(self, i: int) -> np.ndarray:
        return geodesy.enu_to_ecef(self.position[i], self.site)


def generate_trajectory(cfg: ScenarioConfig) -> Trajectory:
    path = Path(cfg.waypoints, cfg.corner_radius)
    profile, stops = build_schedule(cfg, path.length)
    n = int(round(profile.duration * cfg.imu_rate))
    t = np.arange(n + 1) / cfg.imu_rate
    s, v, a = profile.evaluate(t)
    xy, heading, kappa = path.evaluate(s)
    pos = np.column_stack([xy, np.full(t.size, LEVER_ARM[2])])
    vel = np.column_stack([v * np.cos(heading), v * np.sin(heading), np.zeros(t.size)])
    return Trajectory(
        t=t,
        position=pos,
        velocity=vel,
        yaw=heading,
        yaw_rate=v * kappa,
        speed=v,
        arc_length=s,
        stationary=v == 0.0,
        site=cfg.site,
        stops=stops,
        path_length=path.length,
    )


# --- sensors -----------------------------------------------------------------------


@dataclass
class Scenario:
    config: ScenarioConfig
    truth: Trajectory
    records: list[EpochRecord]
    constellation: list[gnss.SatelliteEphemeris]
    elevations: dict[tuple[int, int], float]
    clock: np.ndarray
    tropo: np.ndarray
    biases: tuple[np.ndarray, np.ndarray]

    @property
    def observation_count(self) -> int:
        return sum(len(r.gnss) for r in self.records)


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("imu", "encoder", "gnss", "multipath", "spare")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def synthesize_sensors(
    truth: Trajectory,
    cfg: ScenarioConfig,
    rng: dict[str, np.random.Generator] | None = None,
    constellation: list[gnss.SatelliteEphemeris] | None = None,
) -> Scenario:
    streams = rng or _streams(cfg.seed)
    noise = cfg.noise
    sats = constellation or gnss.default_constellation(cfg.site)
    dt = 1.0 / cfg.imu_rate
    n = truth.t.size
    g = geodesy.normal_gravity(cfg.site.lat, cfg.site.height + LEVER_ARM[2])

    # IMU: interval averages so that strapdown increments are exact
    r_imu = streams["imu"]
    ba = r_imu.normal(0.0, noise.accel_bias, 3)
    bg = r_imu.normal(0.0, noise.gyro_bias, 3)
    dv = np.diff(truth.velocity, axis=0)
    dpsi = np.diff(truth.yaw)
    psi_mid = truth.yaw[:-1] + 0.5 * dpsi
    moving = (truth.speed[:-1] > 0) | (truth.speed[1:] > 0)
    acc_n = dv / dt + np.array([0.0, 0.0, g])
    c, s = np.cos(psi_mid), np.sin(psi_mid)
    f = np.column_stack([c * acc_n[:, 0] + s * acc_n[:, 1], -s * acc_n[:, 0] + c * acc_n[:, 1], acc_n[:, 2]])
    w = np.column_stack([np.zeros(n - 1), np.zeros(n - 1), dpsi / dt])
    m = n - 1
    walk_a = np.cumsum(r_imu.normal(0.0, noise.accel_bias_walk * math.sqrt(dt), (m, 3)), axis=0)
    walk_g = np.cumsum(r_imu.normal(0.0, noise.gyro_bias_walk * math.sqrt(dt), (m, 3)), axis=0)
    white_a = r_imu.normal(0.0, 1.0, (m, 3)) * (noise.vrw / math.sqrt(dt))
    white_g = r_imu.normal(0.0, 1.0, (m, 3)) * (noise.arw / math.sqrt(dt))
    vib_a = r_imu.normal(0.0, noise.vibration_accel, (m, 3)) * moving[:, None]
    vib_g = r_imu.normal(0.0, noise.vibration_gyro, (m, 3)) * moving[:, None]
    f_meas = f + ba + walk_a + white_a + vib_a
    w_meas = w + bg + walk_g + white_g + vib_g
    # the sample stamped t=0 is a static reading used only for levelling
    f0 = np.array([0.0, 0.0, g]) + ba + r_imu.normal(0.0, 1.0, 3) * (noise.vrw / math.sqrt(dt))
    w0 = bg + r_imu.normal(0.0, 1.0, 3) * (noise.arw / math.sqrt(dt))
    imu = [ImuSample(0.0, f0, w0)] + [ImuSample(float(truth.t[i + 1]), f_meas[i], w_meas[i]) for i in range(m)]

    # encoders: interval averages of rear-axle speed and heading rate
    r_enc = streams["encoder"]
    step = cfg.imu_rate // cfg.encoder_rate
    tau = 1.0 / cfg.encoder_rate
    enc_idx = np.arange(step, n, step)
    enc = []
    for j in enc_idx:
        v_lon = (truth.arc_length[j] - truth.arc_length[j - step]) / tau
        yaw_rate = (truth.yaw[j] - truth.yaw[j - step]) / tau
        if v_lon > 0 or truth.speed[j - step : j + 1].any():
            v_lon += r_enc.normal(0.0, noise.encoder_speed)
            yaw_rate += r_enc.normal(0.0, noise.encoder_yaw_rate)
        enc.append(WheelOdometrySample(float(v_lon), float(yaw_rate), tau, float(truth.t[j])))

    # GNSS
    r_g = streams["gnss"]
    gstep = cfg.imu_rate // cfg.gnss_rate
    epochs_idx = np.arange(0, n, gstep)
    n_ep = epochs_idx.size
    clock = 100.0 * r_g.standard_normal() + np.concatenate(
        [[0.0], np.cumsum(r_g.normal(0.0, noise.clock_walk, n_ep - 1))]
    )
    tropo = cfg.tropo_zenith + np.concatenate([[0.0], np.cumsum(r_g.normal(0.0, noise.tropo_walk, n_ep - 1))])
    ambiguities = {e.sat: int(r_g.integers(-100_000, 100_000)) * gnss.L1_WAVELENGTH for e in sats}
    records: list[EpochRecord] = []
    elevations: dict[tuple[int, int], float] = {}
    imu_ptr = 0
    enc_ptr = 0
    for k, i in enumerate(epochs_idx):
        t = float(truth.t[i])
        p = truth.ecef(int(i))
        obs = []
        for e in sats:
            sp = gnss.satellite_position(e, t)
            el = gnss.elevation_angle(sp, p)
            if el <= gnss.ELEVATION_MASK:
                continue
            rng_m = float(np.linalg.norm(sp - p))
            clean = rng_m + clock[k] + tropo[k] * gnss.tropo_mapping(el)
            sin_el = math.sin(el)
            pr = clean + r_g.normal(0.0, noise.pseudorange / sin_el)
            cp = clean + ambiguities[e.sat] + r_g.normal(0.0, noise.carrier_phase / sin_el)
            obs.append(RawObservation(e.sat, pr, cp))
            elevations[(k, e.sat)] = el
        block = []
        while imu_ptr < len(imu) and imu[imu_ptr].t <= t + 1e-9:
            block.append(imu[imu_ptr])
            imu_ptr += 1
        eblock = []
        while enc_ptr < len(enc) and enc[enc_ptr].t <= t + 1e-9:
            eblock.append(enc[enc_ptr])
            enc_ptr += 1
        truth_k = TruthSample(p, truth.velocity[i].copy(), bool(truth.stationary[i]))
        records.append(EpochRecord(k, t, obs, block, eblock, truth_k))
    return Scenario(cfg, truth, records, sats, elevations, clock, tropo, (ba, bg))


@dataclass(frozen=True)
class CorruptionEntry:
    epoch: int
    sat: int
    elevation: float
    range_error: float
    phase_error: float


def inject_multipath(
    records: Sequence[EpochRecord],
    fraction: float,
    rng: np.random.Generator,
    elevations: dict[tuple[int, int], float],
    model: gnss.MultipathModel | None = None,
) -> tuple[list[EpochRecord], list[CorruptionEntry]]:
    """Corrupt ``floor(fraction * N)`` observations chosen uniformly without replacement."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    index = [(ri, oi) for ri, r in enumerate(records) for oi in range(len(r.gnss))]
    count = int(math.floor(fraction * len(index) + 1e-9))
    out = [replace(r, gnss=list(r.gnss)) for r in records]
    if count == 0:
        return out, []
    chosen = np.sort(rng.choice(len(index), size=count, replace=False))
    log = []
    for c in chosen:
        ri, oi = index[int(c)]
        rec = out[ri]
        ob = rec.gnss[oi]
        el = elevations[(rec.epoch, ob.sat)]
        mp = gnss.sample_multipath(el, rng, model)
        rec.gnss[oi] = RawObservation(ob.sat, ob.pr_m + mp.range_error, ob.cp_m + mp.phase_error)
        log.append(CorruptionEntry(rec.epoch, ob.sat, el, mp.range_error, mp.phase_error))
    return out, log


def simulate(cfg: ScenarioConfig, noisy: bool = False):
    """Clean scenario, plus a corrupted copy and its log when ``noisy``."""
    truth = generate_trajectory(cfg)
    streams = _streams(cfg.seed)
    scenario = synthesize_sensors(truth, cfg, streams)
    if not noisy:
        return scenario, None, None
    corrupted, log = inject_multipath(
        scenario.records, cfg.multipath_fraction, streams["multipath"], scenario.elevations, cfg.multipath
    )
    return scenario, corrupted, log


def stationary_intervals(flags: Sequence[bool]) -> list[tuple[int, int]]:
    """Maximal runs of True as (first, last) inclusive index pairs."""
    out = []
    start = None
    for i, f in enumerate(flags):
        if f and start is None:
            start = i
        elif not f and start is not None:
            out.append((start, i - 1))
            start = None
    if start is not None:
        out.append((start, len(flags) - 1))
    return out
