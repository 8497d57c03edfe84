"""Concrete factors: priors, between/random-walk links, ZUPT, CoreNav deltas and GNSS."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from . import gnss
from .errors import BelowHorizon, DimensionMismatch, InvalidKey, NonPositiveDefiniteNoise, NotStationaryPair
from .graph import FactorRecord, Kind, VariableKey, clock_key, phase_key, position_key, tropo_key

ZUPT_SIGMA = 1e-3
PROCESS_SIGMA = 5.0
PSEUDORANGE_SIGMA = 1.0
PHASE_SIGMA = 0.02
TROPO_WALK_SIGMA = 0.01
CLOCK_WALK_SIGMA = 10.0
PHASE_WALK_SIGMA = 1e-4
CORENAV_FLOOR = 1e-4


def _as_cov(cov, dim: int) -> np.ndarray:
    c = np.asarray(cov, dtype=float)
    if c.ndim == 0:
        c = np.eye(dim) * float(c)
    elif c.ndim == 1:
        c = np.diag(c)
    if c.shape != (dim, dim):
        raise DimensionMismatch(f"covariance shape {c.shape} does not match dimension {dim}")
    return c


@dataclass(frozen=True)
class PriorFactorSpec:
    key: VariableKey
    mean: np.ndarray
    covariance: np.ndarray


@dataclass(frozen=True)
class BetweenFactorSpec:
    prev: VariableKey
    curr: VariableKey
    delta: np.ndarray
    covariance: np.ndarray


@dataclass(frozen=True)
class ZuptFactorSpec:
    prev_epoch: int
    curr_epoch: int
    stationary: tuple[bool, bool]
    sigma: float = ZUPT_SIGMA
    source: Literal["detected", "ground-truth"] = "detected"


@dataclass(frozen=True)
class GnssFactorSpec:
    """One satellite observation at one epoch.

    ``receiver`` is an approximate receiver position; when given it is used to
    enforce the elevation mask at construction time.
    """

    epoch: int
    sat: int
    observed: float
    variance: float
    sat_position: np.ndarray
    receiver: np.ndarray | None = None


def elevation_weighted_variance(sigma: float, elevation: float) -> float:
    return (sigma / math.sin(elevation)) ** 2


def make_prior(spec: PriorFactorSpec) -> FactorRecord:
    dim = spec.key.dim
    mean = np.asarray(spec.mean, dtype=float).reshape(-1)
    if mean.size != dim:
        raise DimensionMismatch(f"prior mean has {mean.size} values, {spec.key} needs {dim}")
    eye = np.eye(dim)
    return FactorRecord(
        (spec.key,),
        lambda x: x - mean,
        lambda x: (eye,),
        _as_cov(spec.covariance, dim),
        label=f"prior {spec.key}",
    )


def make_between(spec: BetweenFactorSpec, label: str = "between") -> FactorRecord:
    a, b = spec.prev, spec.curr
    if a.kind != b.kind or a.sat != b.sat:
        raise InvalidKey("between factor keys must share kind and satellite")
    if b.epoch != a.epoch + 1:
        raise InvalidKey(f"between factor keys must be adjacent epochs, got {a.epoch} and {b.epoch}")
    dim = a.dim
    delta = np.asarray(spec.delta, dtype=float).reshape(-1)
    if delta.size != dim:
        raise DimensionMismatch(f"between delta has {delta.size} values, {a} needs {dim}")
    eye = np.eye(dim)
    return FactorRecord(
        (a, b),
        lambda xa, xb: (xb - xa) - delta,
        lambda xa, xb: (-eye, eye),
        _as_cov(spec.covariance, dim),
        label=f"{label} {a}->{b}",
    )


def make_zupt(spec: ZuptFactorSpec) -> FactorRecord:
    if not (spec.stationary[0] and spec.stationary[1]):
        raise NotStationaryPair(f"epochs {spec.prev_epoch}, {spec.curr_epoch} are not both stationary")
    if spec.sigma <= 0:
        raise NonPositiveDefiniteNoise("zupt sigma must be positive")
    return make_between(
        BetweenFactorSpec(position_key(spec.prev_epoch), position_key(spec.curr_epoch), np.zeros(3), spec.sigma**2),
        label=f"zupt[{spec.source}]",
    )


def make_process_between(prev_epoch: int, curr_epoch: int, sigma: float = PROCESS_SIGMA) -> FactorRecord:
    return make_between(
        BetweenFactorSpec(position_key(prev_epoch), position_key(curr_epoch), np.zeros(3), sigma**2),
        label="process",
    )


def make_corenav_between(delta, cov, prev_epoch: int, curr_epoch: int) -> FactorRecord:
    c = _as_cov(cov, 3)
    try:
        ok = np.linalg.eigvalsh(0.5 * (c + c.T)).min() > 0
    except np.linalg.LinAlgError:
        ok = False
    if not ok:
        raise NonPositiveDefiniteNoise("CoreNav delta covariance is not positive definite")
    return make_between(
        BetweenFactorSpec(position_key(prev_epoch), position_key(curr_epoch), delta, c), label="corenav"
    )


def floor_covariance(cov, floor: float = CORENAV_FLOOR) -> np.ndarray:
    """Symmetrise and lift every eigenvalue to at least ``floor``."""
    c = np.asarray(cov, dtype=float)
    c = 0.5 * (c + c.T)
    w, v = np.linalg.eigh(c)
    return (v * np.maximum(w, floor)) @ v.T


def _key(epoch: int, kind: Kind, sat: int) -> VariableKey:
    if kind is Kind.PHASE_BIAS:
        return phase_key(epoch, sat)
    if sat >= 0:
        raise InvalidKey("a satellite id is required for, and only for, phase-bias keys")
    return {Kind.POSITION: position_key, Kind.TROPO: tropo_key, Kind.CLOCK: clock_key}[kind](epoch)


def make_random_walk(kind: Kind, prev_epoch: int, sigma: float, sat: int = -1) -> FactorRecord:
    a = _key(prev_epoch, Kind(kind), sat)
    b = _key(prev_epoch + 1, Kind(kind), sat)
    return make_between(BetweenFactorSpec(a, b, np.zeros(a.dim), sigma**2), label="walk")


def make_epoch_walk(
    prev_epoch: int,
    tropo_sigma: float = TROPO_WALK_SIGMA,
    clock_sigma: float = CLOCK_WALK_SIGMA,
    phase_sigma: float = PHASE_WALK_SIGMA,
    sats: Sequence[int] = (),
) -> FactorRecord:
    """Troposphere, clock and phase-bias random walks into ``prev_epoch + 1`` as one factor.

    The covariance is diagonal, so this equals the separate
    :func:`make_random_walk` factors; it only saves per-factor overhead.
    """
    e = prev_epoch
    pairs = [(tropo_key(e), tropo_key(e + 1)), (clock_key(e), clock_key(e + 1))]
    pairs += [(phase_key(e, s), phase_key(e + 1, s)) for s in sats]
    variances = [tropo_sigma**2, clock_sigma**2] + [phase_sigma**2] * len(sats)
    m = len(pairs)
    blocks = []
    for i in range(m):
        a = np.zeros((m, 1))
        a[i] = -1.0
        blocks += [a, -a]

    def residual(*values):
        return np.array([values[2 * i + 1][0] - values[2 * i][0] for i in range(m)], dtype=float)

    return FactorRecord(
        tuple(k for pair in pairs for k in pair),
        residual,
        lambda *values: blocks,
        np.diag(variances),
        label=f"walk[{e}->{e + 1}]",
    )


def _check_spec(spec: GnssFactorSpec) -> np.ndarray:
    if not spec.variance > 0:
        raise NonPositiveDefiniteNoise("GNSS variance must be positive")
    sat = np.asarray(spec.sat_position, dtype=float)
    if spec.receiver is not None:
        el = gnss.elevation_angle(sat, spec.receiver)
        if el <= gnss.ELEVATION_MASK:
            raise BelowHorizon(f"sat {spec.sat} at {math.degrees(el):.2f} deg is below the mask")
    return sat


def _gnss_residual(spec: GnssFactorSpec, model: gnss.RangeModel, with_phase: bool):
    z = float(spec.observed)
    pr_tail = [np.array([[-1.0]])]
    if with_phase:
        pr_tail.append(np.array([[-1.0]]))

    def residual(p, tropo, clock, *bias):
        b = float(bias[0][0]) if with_phase else 0.0
        return np.array([model.residual(z, p, float(tropo[0]), float(clock[0]), b)])

    def jacobian(p, tropo, clock, *bias):
        d_pos, _, d_trp = model.jacobian(p, float(tropo[0]))
        return [-d_pos.reshape(1, 3), np.array([[-d_trp]]), *pr_tail]

    return residual, jacobian


def _model(spec: GnssFactorSpec, model: gnss.RangeModel | None) -> gnss.RangeModel:
    sat = _check_spec(spec)
    if model is None:
        return gnss.RangeModel(sat)
    if not np.array_equal(model.sat, sat):
        raise DimensionMismatch("shared range model belongs to a different satellite position")
    return model


def make_gnss_pseudorange(spec: GnssFactorSpec, model: gnss.RangeModel | None = None) -> FactorRecord:
    """``model`` may be shared with the carrier-phase factor of the same observation."""
    res, jac = _gnss_residual(spec, _model(spec, model), with_phase=False)
    keys = (position_key(spec.epoch), tropo_key(spec.epoch), clock_key(spec.epoch))
    return FactorRecord(keys, res, jac, np.array([[spec.variance]]), label=f"pr[{spec.epoch}:{spec.sat}]")


def make_gnss_phase(spec: GnssFactorSpec, model: gnss.RangeModel | None = None) -> FactorRecord:
    res, jac = _gnss_residual(spec, _model(spec, model), with_phase=True)
    keys = (
        position_key(spec.epoch),
        tropo_key(spec.epoch),
        clock_key(spec.epoch),
        phase_key(spec.epoch, spec.sat),
    )
    return FactorRecord(keys, res, jac, np.array([[spec.variance]]), label=f"cp[{spec.epoch}:{spec.sat}]")


def make_gnss_observation(
    code: GnssFactorSpec, carrier: GnssFactorSpec, model: gnss.RangeModel | None = None
) -> FactorRecord:
    """Pseudorange and carrier phase of one satellite at one epoch as a two-row factor.

    Equal to the pair :func:`make_gnss_pseudorange`, :func:`make_gnss_phase`
    (the two noises are independent), with one geometry evaluation.
    """
    if (code.epoch, code.sat) != (carrier.epoch, carrier.sat):
        raise InvalidKey("code and carrier specs must share epoch and satellite")
    model = _model(code, model)
    model = _model(carrier, model)
    z_code, z_carrier = float(code.observed), float(carrier.observed)
    clock_block = np.array([[-1.0], [-1.0]])
    bias_block = np.array([[0.0], [-1.0]])

    def residual(p, tropo, clock, bias):
        t, c = float(tropo[0]), float(clock[0])
        return np.array([model.residual(z_code, p, t, c), model.residual(z_carrier, p, t, c, float(bias[0]))])

    def jacobian(p, tropo, clock, bias):
        d_pos, _, d_trp = model.jacobian(p, float(tropo[0]))
        return [-np.vstack((d_pos, d_pos)), np.array([[-d_trp], [-d_trp]]), clock_block, bias_block]

    keys = (position_key(code.epoch), tropo_key(code.epoch), clock_key(code.epoch), phase_key(code.epoch, code.sat))
    return FactorRecord(
        keys, residual, jacobian, np.diag([code.variance, carrier.variance]), label=f"gnss[{code.epoch}:{code.sat}]"
    )
