"""INS / wheel-odometry error-state EKF with ZUPT and non-holonomic updates.

Mechanisation runs in a fixed East-North-Up tangent plane at the dataset
origin; Earth rate and transport rate are neglected at rover speeds. The error
state is ``[dtheta, dv, dp, b_a, b_g]``. The first nine entries are errors
that are folded into the nominal state and zeroed after every update; the
bias entries are the running bias estimates applied to raw IMU samples.
Attitude errors follow ``C_true = (I + [dtheta]x) C_hat``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import geodesy
from .errors import EmptyWindow, NonFiniteInput
from .factors import floor_covariance
from .records import EpochRecord, ImuSample, WheelOdometrySample

ATT, VEL, POS, BA, BG = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass
class NavState:
    """Body-to-ENU attitude, ENU velocity and ENU position relative to the origin."""

    attitude: np.ndarray
    velocity: np.ndarray
    position: np.ndarray

    def copy(self) -> NavState:
        return NavState(self.attitude.copy(), self.velocity.copy(), self.position.copy())

    def geodetic(self, origin: geodesy.GeodeticPosition) -> geodesy.GeodeticPosition:
        return geodesy.ecef_to_geodetic(geodesy.enu_to_ecef(self.position, origin))


@dataclass
class NavErrorState:
    x: np.ndarray
    P: np.ndarray

    @property
    def b_a(self) -> np.ndarray:
        return self.x[BA]

    @property
    def b_g(self) -> np.ndarray:
        return self.x[BG]

    def copy(self) -> NavErrorState:
        return NavErrorState(self.x.copy(), self.P.copy())


@dataclass(frozen=True)
class LeverArm:
    """Rear-axle to body (IMU) offset in body axes."""

    vector: tuple[float, float, float] = (0.0, 0.0, 0.25)

    def __post_init__(self) -> None:
        v = tuple(float(x) for x in np.asarray(self.vector, dtype=float).reshape(-1))
        if len(v) != 3:
            raise ValueError("lever arm must have three components")
        object.__setattr__(self, "vector", v)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.vector)


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time densities used by the filter's process model."""

    accel: float = 0.02  # m/s/sqrt(s)
    gyro: float = 3e-4  # rad/s/sqrt(s)
    accel_bias: float = 1e-5  # m/s^2/sqrt(s)
    gyro_bias: float = 1e-6  # rad/s/sqrt(s)


@dataclass(frozen=True)
class CoreNavConfig:
    noise: ImuNoise = field(default_factory=ImuNoise)
    lever: LeverArm = field(default_factory=LeverArm)
    use_zupt: bool = True
    use_nhc: bool = True
    use_wo: bool = True
    zupt_sigma_v: float = 0.01
    zupt_sigma_w: float = 0.002
    nhc_sigma: float = 0.05
    nhc_every_imu: bool = False
    wo_sigma_v: float = 0.05
    wo_sigma_yaw_rate: float = 0.01
    detector_window: float = 0.5
    detector_gyro: float = 0.01
    detector_accel: float = 0.005
    detector_speed: float = 0.01
    oracle_stops: bool = False
    initial_yaw: float = 0.0
    leveling_time: float = 1.0
    sigma_attitude0: float = 2e-3
    sigma_velocity0: float = 0.02
    sigma_position0: float = 1e-3
    sigma_accel_bias0: float = 2e-3
    sigma_gyro_bias0: float = 5e-4
    cov_floor: float = 1e-4
    # report deltas from mechanized increments only, leaving out position jumps from updates
    increment_deltas: bool = True


class LocalGravity:
    """Normal gravity magnitude at the origin latitude, varying with ENU height."""

    def __init__(self, origin: geodesy.GeodeticPosition | None = None):
        self.origin = origin or geodesy.GeodeticPosition(0.0, 0.0, 0.0)
        self._g0 = geodesy.normal_gravity(self.origin.lat, self.origin.height)
        h = 1.0
        self.height_gradient_exact = (
            geodesy.normal_gravity(self.origin.lat, self.origin.height - h)
            - geodesy.normal_gravity(self.origin.lat, self.origin.height + h)
        ) / (2.0 * h)

    def magnitude(self, up: float) -> float:
        # linear free-air term; the quadratic one is below 1e-9 m/s^2 for |up| < 100 m
        return self._g0 - self.height_gradient_exact * up

    @property
    def height_gradient(self) -> float:
        return 2.0 * self._g0 / geodesy.WGS84_A


def _as_gravity(gravity) -> LocalGravity:
    return gravity if isinstance(gravity, LocalGravity) else LocalGravity()


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not math.isfinite(float(np.sum(a))):
            raise NonFiniteInput("non-finite IMU input or state")


def _check_dt(dt: float) -> None:
    if not (0.0 < dt <= 0.1 + 1e-12):
        raise ValueError(f"dt must be in (0, 0.1] s, got {dt}")


_EYE3 = np.eye(3)
_EYE15 = np.eye(15)


def _mechanize(c0, v0, p0, f, w, dt, grav: LocalGravity, renormalize: bool = True):
    c1 = c0 @ geodesy.so3_exp(w * dt)
    if renormalize:
        c1 = geodesy.reorthonormalize(c1)
    # specific force rotated to the mid-interval attitude, second order in the half angle
    hw = 0.5 * dt * w
    wxf = geodesy.cross3(hw, f)
    acc = c0 @ (f + wxf + 0.5 * geodesy.cross3(hw, wxf))
    acc[2] -= grav.magnitude(float(p0[2]))
    v1 = v0 + acc * dt
    p1 = p0 + 0.5 * dt * (v0 + v1)
    return c1, v1, p1


def _cross_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


def _exp_batch(phi: np.ndarray) -> np.ndarray:
    """Row-wise :func:`geodesy.so3_exp` for an (m, 3) array of rotation vectors."""
    a2 = np.einsum("ki,ki->k", phi, phi)
    small = a2 < 1e-16
    a = np.sqrt(np.where(small, 1.0, a2))
    s = np.where(small, 1.0, np.sin(a) / a)
    c = np.where(small, 0.5, (1.0 - np.cos(a)) / np.where(small, 1.0, a2))
    k = np.zeros((len(phi), 3, 3))
    k[:, 0, 1], k[:, 0, 2], k[:, 1, 2] = -phi[:, 2], phi[:, 1], -phi[:, 0]
    k[:, 1, 0], k[:, 2, 0], k[:, 2, 1] = phi[:, 2], -phi[:, 1], phi[:, 0]
    return _EYE3 + s[:, None, None] * k + c[:, None, None] * (k @ k)


def _mechanize_batch(c0, v0, p0, f, w, dt, grav: LocalGravity):
    """Run :func:`_mechanize` over consecutive samples sharing one bias estimate.

    Returns the attitudes at the start and end of every step plus the
    velocities and positions at the end of every step. Gravity is taken at
    the starting height, which moves by millimetres within a batch.
    """
    m = len(dt)
    inc = _exp_batch(w * dt[:, None])
    c_start = np.empty((m, 3, 3))
    c_end = np.empty((m, 3, 3))
    c = c0
    for i in range(m):
        c_start[i] = c
        c = c @ inc[i]
        c_end[i] = c
    c_end[-1] = geodesy.reorthonormalize(c_end[-1])
    hw = 0.5 * dt[:, None] * w
    wxf = _cross_rows(hw, f)
    acc = np.einsum("kij,kj->ki", c_start, f + wxf + 0.5 * _cross_rows(hw, wxf))
    acc[:, 2] -= grav.magnitude(float(p0[2]))
    v = v0 + np.cumsum(acc * dt[:, None], axis=0)
    v_start = np.vstack([v0[None, :], v[:-1]])
    p = p0 + np.cumsum(0.5 * dt[:, None] * (v_start + v), axis=0)
    return c_start, c_end, v, p


def mechanize(state: NavState, imu: ImuSample, dt: float, gravity: LocalGravity | None = None) -> NavState:
    """Strapdown integration of one bias-corrected IMU sample."""
    _check_dt(dt)
    f = np.asarray(imu.f, dtype=float)
    w = np.asarray(imu.w, dtype=float)
    _check_finite(f, w, state.attitude, state.velocity, state.position)
    c1, v1, p1 = _mechanize(state.attitude, state.velocity, state.position, f, w, dt, _as_gravity(gravity))
    return NavState(c1, v1, p1)


def initial_error_state(config: CoreNavConfig | None = None) -> NavErrorState:
    cfg = config or CoreNavConfig()
    sig = np.concatenate(
        [
            np.full(3, cfg.sigma_attitude0),
            np.full(3, cfg.sigma_velocity0),
            np.full(3, cfg.sigma_position0),
            np.full(3, cfg.sigma_accel_bias0),
            np.full(3, cfg.sigma_gyro_bias0),
        ]
    )
    return NavErrorState(np.zeros(15), np.diag(sig**2))


def _transition(c: np.ndarray, f: np.ndarray, dt: float, height_gradient: float) -> np.ndarray:
    phi = _EYE15.copy()
    fn = c @ f
    cd = c * dt
    phi[0:3, 12:15] = -cd
    phi[3:6, 0:3] = geodesy.skew(-dt * fn)
    phi[3:6, 9:12] = -cd
    phi[5, 8] = height_gradient * dt
    phi[6, 3] = phi[7, 4] = phi[8, 5] = dt
    return phi


def transition_matrix(state: NavState, imu: ImuSample, dt: float, gravity: LocalGravity | None = None) -> np.ndarray:
    """First-order discrete transition ``I + F dt`` of the error state."""
    return _transition(state.attitude, np.asarray(imu.f, dtype=float), dt, _as_gravity(gravity).height_gradient)


class _PendingPropagation:
    """Covariance propagation deferred over several IMU steps.

    The transition is built from interval sums of the attitude and rotated
    specific force and applied to second order, so mechanization can run at
    IMU rate while the 15x15 products run only before updates.
    """

    def __init__(self, height_gradient: float, qdiag: np.ndarray):
        self.hgrad = height_gradient
        self.qdiag = qdiag
        self.reset()

    def reset(self) -> None:
        self.c_dt = np.zeros((3, 3))
        self.fn_dt = np.zeros(3)
        self.t = 0.0

    def add(self, c: np.ndarray, f: np.ndarray, dt: float) -> None:
        self.c_dt += c * dt
        self.fn_dt += (c @ f) * dt
        self.t += dt

    def add_batch(self, c: np.ndarray, f: np.ndarray, dt: np.ndarray) -> None:
        self.c_dt += np.einsum("kij,k->ij", c, dt)
        self.fn_dt += np.einsum("kij,kj,k->i", c, f, dt)
        self.t += float(dt.sum())

    def apply(self, p: np.ndarray) -> np.ndarray:
        t = self.t
        if t == 0.0:
            return p
        a = np.zeros((15, 15))
        a[0:3, 12:15] = -self.c_dt
        a[3:6, 0:3] = geodesy.skew(-self.fn_dt)
        a[3:6, 9:12] = -self.c_dt
        a[5, 8] = self.hgrad * t
        a[6, 3] = a[7, 4] = a[8, 5] = t
        phi = _EYE15 + a + 0.5 * (a @ a)
        # noise enters on average half way through the interval; the congruence keeps Q PSD
        half = _EYE15 + 0.5 * a
        qd = (half * (self.qdiag * t)) @ half.T
        out = phi @ p @ phi.T + qd
        self.reset()
        return 0.5 * (out + out.T)


def _process_diag(n: ImuNoise) -> np.ndarray:
    return np.concatenate(
        [
            np.full(3, n.gyro**2),
            np.full(3, n.accel**2),
            np.zeros(3),
            np.full(3, n.accel_bias**2),
            np.full(3, n.gyro_bias**2),
        ]
    )


_DIAG15 = np.diag_indices(15)


def _propagate(P: np.ndarray, phi: np.ndarray, qdt: np.ndarray) -> np.ndarray:
    p = phi @ P @ phi.T
    p[_DIAG15] += qdt
    return 0.5 * (p + p.T)


def propagate_error(
    err: NavErrorState,
    state: NavState,
    imu: ImuSample,
    dt: float,
    noise: ImuNoise | None = None,
    gravity: LocalGravity | None = None,
) -> NavErrorState:
    """Covariance propagation ``P <- Phi P Phi^T + Q`` for a bias-corrected sample."""
    _check_dt(dt)
    _check_finite(imu.f, imu.w, err.P)
    n = noise if noise is not None else ImuNoise()
    phi = transition_matrix(state, imu, dt, gravity)
    x = err.x.copy()
    x[:9] = phi[:9, :9] @ x[:9]
    return NavErrorState(x, _propagate(err.P, phi, _process_diag(n) * dt))


def kalman_update(err: NavErrorState, H: np.ndarray, innovation: np.ndarray, R: np.ndarray) -> NavErrorState:
    """Joseph-form update; the bias block of ``x`` holds totals and is not a predicted error."""
    x = err.x.copy()
    y = innovation - H[:, :9] @ x[:9]
    P = err.P
    pht = P @ H.T
    s = H @ pht + R
    k = np.linalg.solve(s, pht.T).T
    ikh = _EYE15 - k @ H
    p = ikh @ P @ ikh.T + k @ R @ k.T
    x += k @ y
    return NavErrorState(x, 0.5 * (p + p.T))


def fold(err: NavErrorState, state: NavState) -> tuple[NavErrorState, NavState]:
    """Apply the attitude/velocity/position correction to the nominal state and zero it."""
    x = err.x
    c = geodesy.so3_exp(x[ATT]) @ state.attitude
    new_state = NavState(c, state.velocity + x[VEL], state.position + x[POS])
    x = x.copy()
    x[:9] = 0.0
    return NavErrorState(x, err.P), new_state


_H_ZUPT = np.zeros((6, 15))
_H_ZUPT[0:3, VEL] = np.eye(3)
_H_ZUPT[3:6, BG] = -np.eye(3)


def zupt_update(
    err: NavErrorState, state: NavState, imu: ImuSample, sigma_v: float = 0.01, sigma_w: float = 0.002
) -> NavErrorState:
    """Zero velocity and zero angular rate; ``imu`` is raw, the gyro bias estimate is removed here."""
    w_hat = np.asarray(imu.w, dtype=float) - err.b_g
    innovation = np.concatenate([-state.velocity, -w_hat])
    R = np.diag([sigma_v**2] * 3 + [sigma_w**2] * 3)
    return kalman_update(err, _H_ZUPT, innovation, R)


def _rear_velocity_jacobian(state: NavState, lever: np.ndarray) -> np.ndarray:
    ct = state.attitude.T
    H = np.zeros((3, 15))
    H[:, ATT] = ct @ geodesy.skew(state.velocity)
    H[:, VEL] = ct
    H[:, BG] = -geodesy.skew(lever)
    return H


def rear_axle_velocity(state: NavState, w_hat: np.ndarray, lever: np.ndarray) -> np.ndarray:
    return state.attitude.T @ state.velocity - geodesy.cross3(w_hat, lever)


def nonholonomic_update(
    err: NavErrorState, state: NavState, imu: ImuSample, lever: LeverArm | None = None, sigma: float = 0.05
) -> NavErrorState:
    """Zero lateral and vertical velocity of the rear axle, expressed in body axes."""
    arm = (lever or LeverArm()).array
    w_hat = np.asarray(imu.w, dtype=float) - err.b_g
    H = _rear_velocity_jacobian(state, arm)[1:3]
    innovation = -rear_axle_velocity(state, w_hat, arm)[1:3]
    return kalman_update(err, H, innovation, np.eye(2) * sigma**2)


@dataclass(frozen=True)
class InsWindowSample:
    """INS-derived quantities compared against the encoders over their interval."""

    t: float
    v_rear_body: np.ndarray
    heading_rate_term: float
    cos_pitch: float


def heading_rate_term(w_hat: np.ndarray, roll: float) -> float:
    """``wy sin(roll) + wz cos(roll)``, which equals heading rate times cos(pitch)."""
    return float(w_hat[1] * math.sin(roll) + w_hat[2] * math.cos(roll))


def window_sample(state: NavState, w_hat: np.ndarray, lever: np.ndarray, t: float) -> InsWindowSample:
    c = state.attitude
    roll = math.atan2(c[2, 1], c[2, 2])
    cos_pitch = math.sqrt(max(0.0, 1.0 - c[2, 0] ** 2))
    return InsWindowSample(t, rear_axle_velocity(state, w_hat, lever), heading_rate_term(w_hat, roll), cos_pitch)


def _window_samples(items, times, lever: np.ndarray) -> list[InsWindowSample]:
    """Vectorised :func:`window_sample` over buffered (attitude, velocity, rate) tuples."""
    if not items:
        return []
    c = np.array([it[0] for it in items])
    v = np.array([it[1] for it in items])
    w = np.array([it[2] for it in items])
    v_body = np.einsum("kji,kj->ki", c, v) - _cross_rows(w, np.broadcast_to(lever, w.shape))
    roll = np.arctan2(c[:, 2, 1], c[:, 2, 2])
    rate = w[:, 1] * np.sin(roll) + w[:, 2] * np.cos(roll)
    cos_pitch = np.sqrt(np.clip(1.0 - c[:, 2, 0] ** 2, 0.0, 1.0))
    return [InsWindowSample(t, v_body[i], float(rate[i]), float(cos_pitch[i])) for i, t in enumerate(times)]


def _trapezoid_mean(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    if t.size == 1 or t[-1] <= t[0]:
        return y.mean(axis=0)
    return _trapezoid(y, t, axis=0) / (t[-1] - t[0])


def wheel_odometry_measurement(
    state: NavState,
    wo: WheelOdometrySample,
    window: Sequence[InsWindowSample],
    lever: LeverArm | None = None,
    sigma_v: float = 0.05,
    sigma_yaw_rate: float = 0.01,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(H, innovation, R)`` comparing encoders with INS averages over the encoder interval.

    Innovation rows: longitudinal speed difference, minus lateral and minus
    vertical rear-axle velocity, and heading rate (scaled by the mean pitch
    cosine) difference.
    """
    if len(window) == 0:
        raise EmptyWindow("no INS samples inside the encoder interval")
    arm = (lever or LeverArm()).array
    t = np.array([s.t for s in window])
    v = _trapezoid_mean(t, np.array([s.v_rear_body for s in window]))
    rate = float(_trapezoid_mean(t, np.array([s.heading_rate_term for s in window])))
    cos_pitch = float(_trapezoid_mean(t, np.array([s.cos_pitch for s in window])))
    roll, _, _ = geodesy.euler_from_body_to_nav(state.attitude)
    H = np.zeros((4, 15))
    H[0:3] = _rear_velocity_jacobian(state, arm)
    H[3, BG] = -np.array([0.0, math.sin(roll), math.cos(roll)])
    innovation = np.array([wo.v_lon - v[0], -v[1], -v[2], wo.yaw_rate * cos_pitch - rate])
    R = np.diag([sigma_v**2] * 3 + [sigma_yaw_rate**2])
    return H, innovation, R


def wheel_odometry_update(
    err: NavErrorState,
    state: NavState,
    wo: WheelOdometrySample,
    window: Sequence[InsWindowSample],
    lever: LeverArm | None = None,
    sigma_v: float = 0.05,
    sigma_yaw_rate: float = 0.01,
) -> NavErrorState:
    """Encoder speed and heading rate against INS averages over the encoder interval."""
    return kalman_update(err, *wheel_odometry_measurement(state, wo, window, lever, sigma_v, sigma_yaw_rate))


def detect_stationary(
    window: Sequence[ImuSample],
    gyro_threshold: float = 0.01,
    accel_threshold: float = 0.005,
    encoders: Sequence[WheelOdometrySample] | None = None,
    speed_threshold: float = 0.01,
) -> bool:
    """Accelerometer-magnitude variance and peak angular rate over a window.

    Constant-velocity driving on perfectly smooth ground is indistinguishable
    from rest for an IMU, so when encoder samples are supplied they must also
    report near-zero speed.
    """
    if len(window) == 0:
        raise EmptyWindow("stationarity detector needs at least one IMU sample")
    f = np.array([s.f for s in window], dtype=float)
    w = np.array([s.w for s in window], dtype=float)
    mag = np.linalg.norm(f, axis=1)
    still = bool(np.var(mag) < accel_threshold and np.max(np.linalg.norm(w, axis=1)) < gyro_threshold)
    if still and encoders:
        still = all(abs(e.v_lon) < speed_threshold for e in encoders)
    return still


def level_attitude(samples: Sequence[ImuSample], yaw: float = 0.0) -> np.ndarray:
    """Roll and pitch from the mean specific force of a static interval."""
    f = np.mean([s.f for s in samples], axis=0)
    roll = math.atan2(f[1], f[2])
    pitch = math.atan2(f[0], math.hypot(f[1], f[2]))
    return geodesy.body_to_nav(roll, pitch, yaw)


@dataclass
class CoreNavEpoch:
    t: float
    position: np.ndarray
    delta: np.ndarray
    covariance: np.ndarray
    stationary: bool


@dataclass
class CoreNavResult:
    epochs: list[CoreNavEpoch]
    final_state: NavState
    final_error: NavErrorState
    updates: dict[str, int]
    min_eigenvalue: float
    max_asymmetry: float
    trace_violations: int


class _Window:
    """Trailing buffer of samples with timestamps."""

    def __init__(self, span: float):
        self.span = span
        self.items: list = []

    def push(self, t: float, item) -> None:
        self.items.append((t, item))
        cut = t - self.span - 1e-9
        i = 0
        while i < len(self.items) and self.items[i][0] < cut:
            i += 1
        if i:
            del self.items[:i]

    def since(self, t0: float) -> list:
        return [it for (t, it) in self.items if t >= t0 - 1e-9]

    def times_since(self, t0: float) -> list:
        return [t for (t, _) in self.items if t >= t0 - 1e-9]


class StationarityDetector:
    """Streaming wrapper around :func:`detect_stationary` over a trailing window."""

    def __init__(self, cfg: CoreNavConfig, t_first: float):
        self.cfg = cfg
        self.t_first = t_first
        self.imu = _Window(cfg.detector_window)
        self.enc = _Window(cfg.detector_window)

    def push_imu(self, s: ImuSample) -> None:
        self.imu.push(s.t, s)

    def push_encoder(self, e: WheelOdometrySample) -> None:
        self.enc.push(e.t, e)

    def stationary(self, t: float) -> bool:
        cfg = self.cfg
        if t - self.t_first < cfg.detector_window - 1e-9:
            return False
        imu = self.imu.since(t - cfg.detector_window)
        if len(imu) < 2:
            return False
        enc = self.enc.since(t - cfg.detector_window)
        return detect_stationary(imu, cfg.detector_gyro, cfg.detector_accel, enc, cfg.detector_speed)


def stationary_flags(records: Sequence[EpochRecord], cfg: CoreNavConfig | None = None) -> list[bool]:
    """Detector decision at every epoch time, from IMU and encoder data only."""
    cfg = cfg or CoreNavConfig()
    imu_all = [s for r in records for s in r.imu]
    if not imu_all:
        raise EmptyWindow("records carry no IMU samples")
    det = StationarityDetector(cfg, imu_all[0].t)
    flags = []
    for r in records:
        for s in r.imu:
            det.push_imu(s)
        for e in r.enc:
            det.push_encoder(e)
        flags.append(det.stationary(r.t))
    return flags


def _check_trace(before: NavErrorState, after: NavErrorState) -> bool:
    return float(np.trace(after.P)) <= float(np.trace(before.P)) * (1.0 + 1e-12) + 1e-18


def run_corenav(
    records: Sequence[EpochRecord],
    config: CoreNavConfig | None = None,
    origin: geodesy.GeodeticPosition | None = None,
    initial_state: NavState | None = None,
    initial_bias: tuple[np.ndarray, np.ndarray] | None = None,
    observer: Callable[[str, float, NavState, NavErrorState], None] | None = None,
) -> CoreNavResult:
    """Integrate a record stream and report ENU position deltas at every epoch.

    Without ``initial_state`` the filter starts at rest at the ENU origin,
    levelled from the first ``leveling_time`` seconds of IMU data, with yaw
    ``config.initial_yaw``. ``observer`` is called after every folded update
    with the update kind, time, state and error state.
    """
    cfg = config or CoreNavConfig()
    if not records:
        raise EmptyWindow("no records")
    imu_all = [s for r in records for s in r.imu]
    if not imu_all:
        raise EmptyWindow("records carry no IMU samples")
    grav = LocalGravity(origin)
    arm = cfg.lever.array
    t_first = imu_all[0].t
    if initial_state is None:
        lev = [s for s in imu_all if s.t <= t_first + cfg.leveling_time] or imu_all[:1]
        state = NavState(level_attitude(lev, cfg.initial_yaw), np.zeros(3), np.zeros(3))
    else:
        state = initial_state.copy()
    err = initial_error_state(cfg)
    if initial_bias is not None:
        err.x[BA], err.x[BG] = initial_bias

    detector = StationarityDetector(cfg, t_first)
    ins_window = _Window(1.0)
    counts = {"zupt": 0, "nhc": 0, "wo": 0}
    min_eig = float("inf")
    max_asym = 0.0
    trace_bad = 0
    moving = True
    t_prev: float | None = None
    epochs: list[CoreNavEpoch] = []
    p_prev_pos = None
    pos_prev = None

    qdiag = _process_diag(cfg.noise)
    hgrad = grav.height_gradient

    pending = _PendingPropagation(hgrad, qdiag)

    def flush() -> None:
        nonlocal err
        if pending.t > 0.0:
            err = NavErrorState(err.x, pending.apply(err.P))

    def apply(kind: str, t: float, new_err: NavErrorState) -> None:
        nonlocal err, state, trace_bad
        if not _check_trace(err, new_err):
            trace_bad += 1
        err, state = fold(new_err, state)
        counts[kind] += 1
        if observer is not None:
            observer(kind, t, state, err)

    travelled = np.zeros(3)
    for rec in records:
        truth_stationary = bool(rec.truth.stationary) if rec.truth is not None else False
        enc = sorted(rec.enc, key=lambda e: e.t)
        ei = 0
        imu = rec.imu
        if not imu:
            continue
        t_imu = np.array([x.t for x in imu])
        f_imu = np.array([x.f for x in imu], dtype=float)
        w_imu = np.array([x.w for x in imu], dtype=float)
        _check_finite(f_imu, w_imu)
        i = 0
        while i < len(imu):
            # mechanize in one batch up to the next sample that carries an update
            j = i
            while (
                j < len(imu) - 1
                and not cfg.nhc_every_imu
                and not (ei < len(enc) and enc[ei].t <= t_imu[j] + 1e-9)
            ):
                j += 1
            start = i
            if t_prev is None:
                # the very first sample only starts the clock
                start = i + 1
                t_prev = float(t_imu[i])
                detector.push_imu(imu[i])
                ins_window.push(imu[i].t, (state.attitude, state.velocity, imu[i].w - err.x[BG]))
            if start <= j:
                sub = slice(start, j + 1)
                dt = np.diff(np.concatenate([[t_prev], t_imu[sub]]))
                if not np.all(dt > 0):
                    raise ValueError("IMU timestamps must be strictly increasing")
                f = f_imu[sub] - err.x[BA]
                w = w_imu[sub] - err.x[BG]
                # the attitude/velocity/position error is zero here because every update is folded
                c_start, c_end, v, pos = _mechanize_batch(
                    state.attitude, state.velocity, state.position, f, w, dt, grav
                )
                pending.add_batch(c_start, f, dt)
                travelled += pos[-1] - state.position
                state = NavState(c_end[-1].copy(), v[-1].copy(), pos[-1].copy())
                w_hat = w_imu[sub] - err.x[BG]
                for n, k in enumerate(range(start, j + 1)):
                    detector.push_imu(imu[k])
                    ins_window.push(imu[k].t, (c_end[n], v[n], w_hat[n]))
                t_prev = float(t_imu[j])
            s = imu[j]
            # encoder epochs that fall on or before this IMU sample
            while ei < len(enc) and enc[ei].t <= s.t + 1e-9:
                wo = enc[ei]
                ei += 1
                flush()
                detector.push_encoder(wo)
                if cfg.oracle_stops:
                    # simulated encoders read exactly zero only during true stops
                    stationary = wo.v_lon == 0.0
                else:
                    stationary = detector.stationary(s.t)
                moving = not stationary
                if stationary and cfg.use_zupt:
                    apply("zupt", s.t, zupt_update(err, state, s, cfg.zupt_sigma_v, cfg.zupt_sigma_w))
                elif cfg.use_wo:
                    t0 = wo.t - wo.tau
                    win = _window_samples(ins_window.since(t0), ins_window.times_since(t0), arm)
                    if win:
                        apply(
                            "wo",
                            s.t,
                            wheel_odometry_update(
                                err, state, wo, win, cfg.lever, cfg.wo_sigma_v, cfg.wo_sigma_yaw_rate
                            ),
                        )
                if moving and cfg.use_nhc and not cfg.nhc_every_imu:
                    apply("nhc", s.t, nonholonomic_update(err, state, s, cfg.lever, cfg.nhc_sigma))
            if moving and cfg.use_nhc and cfg.nhc_every_imu and start <= j:
                flush()
                apply("nhc", s.t, nonholonomic_update(err, state, s, cfg.lever, cfg.nhc_sigma))
            i = j + 1
        flush()
        p_pos = err.P[POS, POS].copy()
        eig = float(np.linalg.eigvalsh(err.P).min())
        min_eig = min(min_eig, eig)
        max_asym = max(max_asym, float(np.max(np.abs(err.P - err.P.T)) / max(np.linalg.norm(err.P), 1e-300)))
        if pos_prev is None:
            delta = np.zeros(3)
            cov = np.eye(3) * cfg.cov_floor
        else:
            delta = (travelled if cfg.increment_deltas else state.position) - pos_prev
            cov = floor_covariance(p_pos - p_prev_pos, cfg.cov_floor)
        stationary_flag = truth_stationary if cfg.oracle_stops else detector.stationary(rec.t)
        epochs.append(CoreNavEpoch(rec.t, state.position.copy(), delta, cov, bool(stationary_flag)))
        pos_prev = (travelled if cfg.increment_deltas else state.position).copy()
        p_prev_pos = p_pos
    return CoreNavResult(epochs, state, err, counts, min_eig, max_asym, trace_bad)


def rotate_about_up(result_epochs: Sequence[CoreNavEpoch], yaw: float) -> list[CoreNavEpoch]:
    """Rotate positions, deltas and covariances about the up axis.

    The tangent-plane filter is equivariant under rotations about up, so a run
    started with the wrong yaw equals the rotated run started with the right one.
    """
    r = geodesy.rot_z(yaw)
    return [
        replace(e, position=r @ e.position, delta=r @ e.delta, covariance=r @ e.covariance @ r.T)
        for e in result_epochs
    ]
