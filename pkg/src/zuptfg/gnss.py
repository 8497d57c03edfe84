"""Satellite geometry, code/carrier observation models and multipath synthesis.

Observables are ionosphere-free; the receiver clock bias is carried in metres
(c * dt). The troposphere is one zenith delay mapped by 1/sin(elevation).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import geodesy
from .errors import BelowHorizon, UnknownSatellite

SPEED_OF_LIGHT = 299_792_458.0
GPS_L1_HZ = 1_575.42e6
L1_WAVELENGTH = SPEED_OF_LIGHT / GPS_L1_HZ
CA_CHIP_M = SPEED_OF_LIGHT / 1.023e6
ELEVATION_MASK = math.radians(5.0)

GPS_ORBIT_RADIUS = 26_559_700.0
GPS_ORBIT_RATE = 2.0 * math.pi / 43_082.0


@dataclass(frozen=True)
class SatelliteEphemeris:
    sat: int
    radius: float
    inclination: float
    raan: float
    anomaly: float
    rate: float

    def __post_init__(self) -> None:
        if self.radius <= 2.0e7:
            raise ValueError("orbit radius must exceed 20,000 km")
        if self.rate <= 0:
            raise ValueError("angular rate must be positive")


@dataclass(frozen=True)
class GnssObservation:
    sat: int
    pseudorange: float
    carrier_phase: float
    elevation: float
    epoch: int


@dataclass
class EpochState:
    position: np.ndarray
    tropo: float = 0.0
    clock: float = 0.0
    phase_biases: dict[int, float] = field(default_factory=dict)


@dataclass(frozen=True)
class MultipathErrorSample:
    range_error: float
    phase_error: float


def satellite_position(eph: SatelliteEphemeris, t: float) -> np.ndarray:
    if t < 0:
        raise ValueError("t must be non-negative")
    u = eph.anomaly + eph.rate * t
    ci, si = math.cos(eph.inclination), math.sin(eph.inclination)
    co, so = math.cos(eph.raan), math.sin(eph.raan)
    cu, su = math.cos(u), math.sin(u)
    return eph.radius * np.array([cu * co - su * ci * so, cu * so + su * ci * co, su * si])


@functools.lru_cache(maxsize=256)
def _local_frame(x: float, y: float, z: float):
    # one receiver position serves every satellite of an epoch
    g = geodesy.ecef_to_geodetic((x, y, z))
    rot = geodesy.rotation_ecef_to_enu(g)
    rot.flags.writeable = False
    return g, rot, geodesy.radii_of_curvature(g.lat)


def _up_vector(receiver) -> tuple[np.ndarray, geodesy.GeodeticPosition]:
    g, rot, _ = _local_frame(float(receiver[0]), float(receiver[1]), float(receiver[2]))
    return rot[2], g


def elevation_angle(sat, receiver) -> float:
    sat = np.asarray(sat, dtype=float)
    receiver = np.asarray(receiver, dtype=float)
    los = sat - receiver
    up, _ = _up_vector(receiver)
    return math.asin(max(-1.0, min(1.0, float(up @ los) / float(np.linalg.norm(los)))))


def azimuth_elevation(sat, receiver) -> tuple[float, float]:
    g = geodesy.ecef_to_geodetic(receiver)
    e, n, u = geodesy.ecef_to_enu(sat, g)
    return math.atan2(e, n), math.atan2(u, math.hypot(e, n))


def tropo_mapping(elevation: float) -> float:
    return 1.0 / math.sin(elevation)


def _geometry(position: np.ndarray, sat: np.ndarray):
    los = sat - position
    rng = float(np.linalg.norm(los))
    e = los / rng
    up, g = _up_vector(position)
    el = math.asin(max(-1.0, min(1.0, float(up @ e))))
    return rng, e, el, up, g


def _model_range(position, tropo, clock, sat) -> tuple[float, float]:
    rng, _, el, _, _ = _geometry(np.asarray(position, dtype=float), np.asarray(sat, dtype=float))
    return rng + clock + tropo * tropo_mapping(el), el


def model_residual(observed: float, position, tropo: float, clock: float, sat, bias: float = 0.0) -> float:
    """``observed - (range + clock + tropo * mapping + bias)`` without cancellation loss.

    Ranges are ~2e7 m, so forming the prediction in double precision would put
    ~4e-9 m of rounding noise on every residual; the difference is taken in
    extended precision instead.
    """
    position = np.asarray(position, dtype=float)
    sat = np.asarray(sat, dtype=float)
    los = sat.astype(np.longdouble) - position.astype(np.longdouble)
    rng = np.sqrt(los @ los)
    up, _ = _up_vector(position)
    el = math.asin(max(-1.0, min(1.0, float(up @ (los / rng)))))
    pred = rng + (clock + tropo * tropo_mapping(el) + bias)
    return float(np.longdouble(observed) - pred)


def predict_pseudorange(state: EpochState, sat) -> float:
    value, el = _model_range(state.position, state.tropo, state.clock, sat)
    if el <= ELEVATION_MASK:
        raise BelowHorizon(f"satellite elevation {math.degrees(el):.2f} deg below mask")
    return value


def predict_carrier_phase(state: EpochState, sat, sat_id: int) -> float:
    if sat_id not in state.phase_biases:
        raise UnknownSatellite(sat_id)
    return predict_pseudorange(state, sat) + state.phase_biases[sat_id]


def range_model_jacobian(position, tropo, sat) -> tuple[np.ndarray, float, float]:
    """Partials of range + clock + tropo*mapping w.r.t. (position, clock, tropo).

    The position row includes the change of the mapping function with the
    receiver's horizon, which matters at low elevation.
    """
    position = np.asarray(position, dtype=float)
    rng, e, el, up, g = _geometry(position, np.asarray(sat, dtype=float))
    _, rot, (m_rad, n_rad) = _local_frame(float(position[0]), float(position[1]), float(position[2]))
    east, north = rot[0], rot[1]
    # d(sin el)/dp = d(up . e)/dp
    dsin = -(up - (up @ e) * e) / rng + (
        (e @ north) * north / (m_rad + g.height) + (e @ east) * east / (n_rad + g.height)
    )
    sin_el = math.sin(el)
    d_pos = -e - tropo * dsin / sin_el**2
    return d_pos, 1.0, tropo_mapping(el)


class RangeModel:
    """Range, clock and troposphere model of one satellite at a fixed position.

    The last receiver state is cached, so the pseudorange and carrier-phase
    factors of one observation, and a residual followed by its Jacobian,
    share a single geometry evaluation.
    """

    __slots__ = ("sat", "_sat_ld", "_key", "_rng", "_mapping", "_d_pos", "_d_tropo")

    def __init__(self, sat):
        self.sat = np.asarray(sat, dtype=float).reshape(3)
        self._sat_ld = self.sat.astype(np.longdouble)
        self._key: tuple | None = None

    def _update(self, position: np.ndarray, tropo: float) -> None:
        key = (float(position[0]), float(position[1]), float(position[2]), tropo)
        if key == self._key:
            return
        pos = np.array(key[:3])
        los = self._sat_ld - pos.astype(np.longdouble)
        rng = np.sqrt(los @ los)
        up, _ = _up_vector(pos)
        el = math.asin(max(-1.0, min(1.0, float(up @ (los / rng)))))
        self._rng, self._mapping = rng, tropo_mapping(el)
        self._d_pos, _, self._d_tropo = range_model_jacobian(pos, tropo, self.sat)
        self._key = key

    def residual(self, observed: float, position, tropo: float, clock: float, bias: float = 0.0) -> float:
        """Bitwise equal to :func:`model_residual`."""
        self._update(position, tropo)
        pred = self._rng + (clock + tropo * self._mapping + bias)
        return float(np.longdouble(observed) - pred)

    def jacobian(self, position, tropo: float) -> tuple[np.ndarray, float, float]:
        self._update(position, tropo)
        return self._d_pos, 1.0, self._d_tropo


# --- constellation -----------------------------------------------------------


def _plane_ephemerides(
    normal: np.ndarray, zenith: np.ndarray, offsets_deg, first_id: int
) -> list[SatelliteEphemeris]:
    n = normal / np.linalg.norm(normal)
    inc = math.acos(max(-1.0, min(1.0, n[2])))
    raan = math.atan2(n[0], -n[1])
    node = np.array([math.cos(raan), math.sin(raan), 0.0])
    in_plane = np.cross(n, node)
    # zenith projected onto the plane is the reference for the along-track offsets
    z = zenith - (zenith @ n) * n
    z /= np.linalg.norm(z)
    u0 = math.atan2(z @ in_plane, z @ node)
    return [
        SatelliteEphemeris(
            sat=first_id + i,
            radius=GPS_ORBIT_RADIUS,
            inclination=inc,
            raan=raan,
            anomaly=u0 + math.radians(off),
            rate=GPS_ORBIT_RATE,
        )
        for i, off in enumerate(offsets_deg)
    ]


def default_constellation(site: geodesy.GeodeticPosition) -> list[SatelliteEphemeris]:
    """Eight satellites in two planes arranged to be visible above ``site``.

    Both planes are tilted away from the site's zenith so the sky coverage is
    not degenerate; geocentric offsets keep all eight above the mask for about
    27 minutes from t = 0.
    """
    rot = geodesy.rotation_ecef_to_enu(site)
    east, north, up = rot
    tilt = math.radians(12.0)
    # plane 1 runs roughly north-south, plane 2 roughly east-west
    n1 = math.cos(tilt) * east + math.sin(tilt) * up
    n2 = -math.cos(tilt) * north + math.sin(tilt) * up
    sats = _plane_ephemerides(n1, up, (-62.0, -30.0, 8.0, 45.0), 1)
    sats += _plane_ephemerides(n2, up, (-55.0, -18.0, 22.0, 57.0), 5)
    return sats


# --- multipath -----------------------------------------------------------------


@dataclass(frozen=True)
class MultipathModel:
    """Single-reflection early-minus-late multipath with an elevation envelope.

    ``amplitude * exp(-elevation / decay)`` is the relative reflection
    amplitude; excess delay and relative phase are drawn uniformly.
    """

    amplitude: float = 0.8
    decay: float = math.radians(25.0)
    spacing_chips: float = 1.0
    chip_m: float = CA_CHIP_M
    max_delay_chips: float = 1.5
    wavelength: float = L1_WAVELENGTH

    def reflection_amplitude(self, elevation: float) -> float:
        return min(0.95, self.amplitude * math.exp(-elevation / self.decay))


def eml_tracking_error(alpha: float, delay: float, phase: float, spacing: float) -> float:
    """Coherent early-minus-late zero crossing (in chips) for one reflection.

    Triangular autocorrelation, infinite bandwidth; ``delay`` in chips.
    """
    ac = alpha * math.cos(phase)
    half = spacing / 2.0
    tau = ac * delay / (1.0 + ac)
    if abs(tau - delay) <= half:
        return tau
    tau = ac * half
    if -1.0 + half <= tau - delay <= -half:
        return tau
    tau = ac * (1.0 + half - delay) / (2.0 - ac)
    if -1.0 - half <= tau - delay <= -1.0 + half:
        return tau
    return 0.0


def sample_multipath(
    elevation: float, rng: np.random.Generator, model: MultipathModel | None = None
) -> MultipathErrorSample:
    if not (0.0 < elevation <= math.pi / 2 + 1e-12):
        raise ValueError("elevation must be in (0, pi/2]")
    model = model or MultipathModel()
    alpha = model.reflection_amplitude(elevation)
    delay = rng.uniform(0.0, model.max_delay_chips)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    code = eml_tracking_error(alpha, delay, phase, model.spacing_chips) * model.chip_m
    carrier = math.atan2(alpha * math.sin(phase), 1.0 + alpha * math.cos(phase))
    return MultipathErrorSample(code, carrier * model.wavelength / (2.0 * math.pi))
