"""WGS-84 frames, rotations and normal gravity.

Constants follow NIMA TR8350.2 (WGS-84). The local navigation frame is
East-North-Up everywhere; body axes are forward-left-up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NearSingularInput

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)
WGS84_GM = 3.986004418e14
WGS84_OMEGA = 7.292115e-5

# Somigliana normal gravity
GRAVITY_EQUATOR = 9.7803253359
GRAVITY_POLE = 9.8321849378
SOMIGLIANA_K = 0.00193185265241
GRAVITY_M = WGS84_OMEGA**2 * WGS84_A**2 * WGS84_B / WGS84_GM

MIN_ECEF_NORM = 6.0e6

_LD = np.longdouble
_A_LD = _LD(WGS84_A)
_E2_LD = _LD(WGS84_F) * (2 - _LD(WGS84_F))


@dataclass(frozen=True)
class GeodeticPosition:
    """Latitude/longitude in radians, height in metres above the ellipsoid."""

    lat: float
    lon: float
    height: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lat) and math.isfinite(self.lon) and math.isfinite(self.height)):
            raise ValueError("geodetic position must be finite")
        if abs(self.lat) > math.pi / 2 + 1e-12:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not (-math.pi < self.lon <= math.pi):
            raise ValueError(f"longitude out of (-pi, pi]: {self.lon}")

    @classmethod
    def from_degrees(cls, lat_deg: float, lon_deg: float, height: float) -> GeodeticPosition:
        return cls(math.radians(lat_deg), wrap_pi(math.radians(lon_deg)), height)


def wrap_pi(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.remainder(angle, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


def radii_of_curvature(lat: float) -> tuple[float, float]:
    """Meridian (M) and prime-vertical (N) radii at a geodetic latitude."""
    s2 = math.sin(lat) ** 2
    w = math.sqrt(1.0 - WGS84_E2 * s2)
    n = WGS84_A / w
    m = WGS84_A * (1.0 - WGS84_E2) / w**3
    return m, n


def geodetic_to_ecef(p: GeodeticPosition) -> np.ndarray:
    # extended precision keeps the round trip at the rounding floor of the ECEF doubles
    lat, lon, h = _LD(p.lat), _LD(p.lon), _LD(p.height)
    slat, clat = np.sin(lat), np.cos(lat)
    n = _A_LD / np.sqrt(1 - _E2_LD * slat * slat)
    return np.array(
        [
            (n + h) * clat * np.cos(lon),
            (n + h) * clat * np.sin(lon),
            (n * (1 - _E2_LD) + h) * slat,
        ],
        dtype=float,
    )


def ecef_to_geodetic(v, max_iterations: int = 10) -> GeodeticPosition:
    """Invert :func:`geodetic_to_ecef` by bounded fixed-point iteration on latitude."""
    x, y, z = (float(c) for c in v)
    if not all(math.isfinite(c) for c in (x, y, z)):
        raise NearSingularInput("non-finite ECEF input")
    if math.sqrt(x * x + y * y + z * z) < MIN_ECEF_NORM:
        raise NearSingularInput("ECEF point too close to the Earth's centre")
    lon = math.atan2(y, x)
    if lon <= -math.pi:
        lon = math.pi
    xl, yl, zl = _LD(x), _LD(y), _LD(z)
    p = np.sqrt(xl * xl + yl * yl)
    lat = np.arctan2(zl, p * (1 - _E2_LD))
    for _ in range(max_iterations):
        slat = np.sin(lat)
        n = _A_LD / np.sqrt(1 - _E2_LD * slat * slat)
        new = np.arctan2(zl + _E2_LD * n * slat, p)
        done = abs(new - lat) < 1e-18
        lat = new
        if done:
            break
    slat, clat = np.sin(lat), np.cos(lat)
    # valid at all latitudes, unlike p / cos(lat) - N
    h = p * clat + zl * slat - _A_LD * np.sqrt(1 - _E2_LD * slat * slat)
    return GeodeticPosition(float(lat), lon, float(h))


def rotation_ecef_to_enu(origin: GeodeticPosition) -> np.ndarray:
    """Rows are the east, north and up unit vectors of ``origin`` in ECEF."""
    slat, clat = math.sin(origin.lat), math.cos(origin.lat)
    slon, clon = math.sin(origin.lon), math.cos(origin.lon)
    return np.array(
        [
            [-slon, clon, 0.0],
            [-slat * clon, -slat * slon, clat],
            [clat * clon, clat * slon, slat],
        ]
    )


def ecef_to_enu(point, origin: GeodeticPosition) -> np.ndarray:
    return rotation_ecef_to_enu(origin) @ (np.asarray(point, dtype=float) - geodetic_to_ecef(origin))


def enu_to_ecef(enu, origin: GeodeticPosition) -> np.ndarray:
    return geodetic_to_ecef(origin) + rotation_ecef_to_enu(origin).T @ np.asarray(enu, dtype=float)


def normal_gravity(lat: float, height: float) -> float:
    """Somigliana normal gravity with the second-order free-air height correction."""
    s2 = math.sin(lat) ** 2
    g0 = GRAVITY_EQUATOR * (1.0 + SOMIGLIANA_K * s2) / math.sqrt(1.0 - WGS84_E2 * s2)
    h = height
    return g0 * (
        1.0
        - 2.0 / WGS84_A * (1.0 + WGS84_F + GRAVITY_M - 2.0 * WGS84_F * s2) * h
        + 3.0 * h * h / WGS84_A**2
    )


def gravity_local(p: GeodeticPosition) -> np.ndarray:
    """Gravity vector in the local ENU frame (points down)."""
    return np.array([0.0, 0.0, -normal_gravity(p.lat, p.height)])


# --- rotations ---------------------------------------------------------------


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def cross3(a, b) -> np.ndarray:
    """Cross product of two 3-vectors without numpy's broadcasting overhead."""
    a0, a1, a2 = a
    b0, b1, b2 = b
    return np.array([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0])


def so3_exp(phi) -> np.ndarray:
    """Rodrigues' formula; exact for any rotation vector."""
    x, y, z = (float(c) for c in phi)
    a2 = x * x + y * y + z * z
    if a2 < 1e-16:
        s, c = 1.0, 0.5
    else:
        a = math.sqrt(a2)
        s = math.sin(a) / a
        c = (1.0 - math.cos(a)) / a2
    xx, yy, zz, xy, xz, yz = x * x, y * y, z * z, x * y, x * z, y * z
    return np.array(
        [
            [1.0 - c * (yy + zz), c * xy - s * z, c * xz + s * y],
            [c * xy + s * z, 1.0 - c * (xx + zz), c * yz - s * x],
            [c * xz - s * y, c * yz + s * x, 1.0 - c * (xx + yy)],
        ]
    )


def reorthonormalize(c: np.ndarray) -> np.ndarray:
    """One Newton step towards the polar factor; quadratic for nearly orthonormal input."""
    return c @ (1.5 * np.eye(3) - 0.5 * (c.T @ c))


def orthonormalize(c: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(c)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def is_rotation(c: np.ndarray, tol: float = 1e-9) -> bool:
    c = np.asarray(c)
    return (
        c.shape == (3, 3)
        and np.max(np.abs(c.T @ c - np.eye(3))) <= tol
        and abs(np.linalg.det(c) - 1.0) <= tol
    )


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def body_to_nav(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """C_b^n for FLU body axes in ENU; yaw counter-clockwise from east, pitch nose-up."""
    return rot_z(yaw) @ rot_y(-pitch) @ rot_x(roll)


def euler_from_body_to_nav(c: np.ndarray) -> tuple[float, float, float]:
    pitch = math.asin(max(-1.0, min(1.0, c[2, 0])))
    roll = math.atan2(c[2, 1], c[2, 2])
    yaw = math.atan2(c[1, 0], c[0, 0])
    return roll, pitch, yaw
