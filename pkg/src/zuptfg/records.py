"""Sensor record types shared by the simulator, the estimators and dataset I/O."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ImuSample:
    """Specific force and angular rate (body FLU) valid for the interval ending at ``t``."""

    t: float
    f: np.ndarray
    w: np.ndarray


@dataclass(frozen=True)
class WheelOdometrySample:
    """Encoder speed and heading rate averaged over ``(t - tau, t]``."""

    v_lon: float
    yaw_rate: float
    tau: float
    t: float = 0.0

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValueError("encoder interval tau must be positive")


@dataclass(frozen=True)
class RawObservation:
    sat: int
    pr_m: float
    cp_m: float


@dataclass(frozen=True)
class TruthSample:
    p_ecef: np.ndarray
    v_enu: np.ndarray
    stationary: bool


@dataclass
class EpochRecord:
    epoch: int
    t: float
    gnss: list[RawObservation] = field(default_factory=list)
    imu: list[ImuSample] = field(default_factory=list)
    enc: list[WheelOdometrySample] = field(default_factory=list)
    truth: TruthSample | None = None
