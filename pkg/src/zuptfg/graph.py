"""Sparse nonlinear least-squares factor graph with incremental re-optimisation.

Variables are ordered epoch-major, kind-minor, which makes the information
matrix of a GNSS chain banded. The engine keeps one linearisation point per
variable plus an offset ``delta``; every factor's whitened linear model is
cached and summed into banded normal equations. Each solve is a
Levenberg-Marquardt iteration on ``delta``. Variables whose offset exceeds
``relinearize_threshold`` are moved to a new linearisation point and only the
factors touching them are re-evaluated. A threshold of 0 re-linearises every
variable that moved, which is plain Levenberg-Marquardt.
"""

from __future__ import annotations

import bisect
import enum
import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded

from .errors import (
    DimensionMismatch,
    DuplicateKey,
    InvalidKey,
    NonFiniteResidual,
    NonPositiveDefiniteNoise,
    SingularNormalEquations,
    UnknownVariable,
)

LAMBDA_MIN = 1e-12
LAMBDA_MAX = 1e12


class Kind(enum.IntEnum):
    POSITION = 0
    TROPO = 1
    CLOCK = 2
    PHASE_BIAS = 3

    @property
    def dim(self) -> int:
        return 3 if self is Kind.POSITION else 1


@dataclass(frozen=True, order=True, unsafe_hash=False)
class VariableKey:
    epoch: int
    kind: Kind
    sat: int = -1
    dim: int = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.epoch < 0:
            raise InvalidKey(f"negative epoch {self.epoch}")
        if (self.kind is Kind.PHASE_BIAS) != (self.sat >= 0):
            raise InvalidKey("a satellite id is required for, and only for, phase-bias keys")
        object.__setattr__(self, "dim", self.kind.dim)
        object.__setattr__(self, "_hash", hash((self.epoch, int(self.kind), self.sat)))

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        if other.__class__ is not VariableKey:
            return NotImplemented
        return self._hash == other._hash and (self.epoch, self.kind, self.sat) == (other.epoch, other.kind, other.sat)

    def __str__(self) -> str:
        tail = f":{self.sat}" if self.kind is Kind.PHASE_BIAS else ""
        return f"{self.kind.name.lower()}[{self.epoch}{tail}]"


# cached so that equal keys are usually the same object, which keeps dict lookups cheap
@functools.lru_cache(maxsize=1 << 16)
def position_key(epoch: int) -> VariableKey:
    return VariableKey(epoch, Kind.POSITION)


@functools.lru_cache(maxsize=1 << 16)
def tropo_key(epoch: int) -> VariableKey:
    return VariableKey(epoch, Kind.TROPO)


@functools.lru_cache(maxsize=1 << 16)
def clock_key(epoch: int) -> VariableKey:
    return VariableKey(epoch, Kind.CLOCK)


@functools.lru_cache(maxsize=1 << 16)
def phase_key(epoch: int, sat: int) -> VariableKey:
    return VariableKey(epoch, Kind.PHASE_BIAS, sat)


ResidualFn = Callable[..., np.ndarray]
JacobianFn = Callable[..., Sequence[np.ndarray]]


@dataclass(frozen=True)
class FactorRecord:
    """A Gaussian constraint ``residual(*values) ~ N(0, covariance)``.

    ``jacobian`` returns one block per key, each of shape (dim, key.dim).
    """

    keys: tuple[VariableKey, ...]
    residual: ResidualFn
    jacobian: JacobianFn
    covariance: np.ndarray
    label: str = ""
    whitener: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        keys = tuple(self.keys)
        object.__setattr__(self, "keys", keys)
        if len(set(keys)) != len(keys):
            raise DuplicateKey("a factor may reference each variable once")
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape[0] != cov.shape[1]:
            raise DimensionMismatch("covariance must be square")
        if cov.shape == (1, 1):
            var = float(cov[0, 0])
            if not (math.isfinite(var) and var > 1e-300):
                raise NonPositiveDefiniteNoise("variance must be finite and positive")
            object.__setattr__(self, "covariance", cov)
            object.__setattr__(self, "whitener", np.array([[1.0 / math.sqrt(var)]]))
            return
        d = np.diag(cov)
        if np.array_equal(cov, np.diag(d)):
            if not (np.all(np.isfinite(d)) and np.all(d > 1e-300)):
                raise NonPositiveDefiniteNoise("variances must be finite and positive")
            object.__setattr__(self, "covariance", cov)
            object.__setattr__(self, "whitener", np.diag(1.0 / np.sqrt(d)))
            return
        if not np.all(np.isfinite(cov)) or np.max(np.abs(cov - cov.T), initial=0.0) > 1e-12 * max(
            1.0, float(np.max(np.abs(cov)))
        ):
            raise NonPositiveDefiniteNoise("covariance must be finite and symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NonPositiveDefiniteNoise("covariance is not positive definite") from exc
        if np.min(np.diag(chol)) <= 1e-150:
            raise NonPositiveDefiniteNoise("covariance is not positive definite")
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "whitener", np.linalg.inv(chol))

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    def whitened(self, *values: np.ndarray) -> np.ndarray:
        return self.whitener @ np.asarray(self.residual(*values), dtype=float).reshape(-1)

    def cost(self, *values: np.ndarray) -> float:
        w = self.whitened(*values)
        return float(w @ w)


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    cost_trace: list[float]
    relinearized: int = 0


@dataclass
class _Linearized:
    record: FactorRecord
    cols: np.ndarray
    a: np.ndarray
    b: np.ndarray
    hflat: np.ndarray = None
    gsel: tuple = None
    indexed_bw: int = -1


class FactorGraph:
    def __init__(self, relinearize_threshold: float = 0.0, initial_bandwidth: int = 16):
        if relinearize_threshold < 0:
            raise ValueError("relinearize_threshold must be >= 0")
        self.relinearize_threshold = float(relinearize_threshold)
        self._keys: list[VariableKey] = []
        self._offset: dict[VariableKey, int] = {}
        self._starts: list[int] = []  # offsets in key order, for column to key lookup
        self._n = 0
        self._cap = 64
        self._bw = int(initial_bandwidth)
        self._theta = np.zeros(self._cap)
        self._delta = np.zeros(self._cap)
        self._u = np.zeros((self._cap, self._bw + 1))
        self._v = np.zeros(self._cap)
        self._s = 0.0
        self._factors: dict[int, _Linearized] = {}
        self._touching: dict[VariableKey, list[int]] = {}
        self._next_id = 0
        self._retired: dict[int, tuple[int, FactorRecord]] = {}
        self._lambda = LAMBDA_MIN
        self.last_factor_ids: list[int] = []

    # --- inspection --------------------------------------------------------

    def __contains__(self, key: VariableKey) -> bool:
        return key in self._offset

    @property
    def keys(self) -> list[VariableKey]:
        return list(self._keys)

    @property
    def num_factors(self) -> int:
        return len(self._factors)

    @property
    def damping(self) -> float:
        return self._lambda

    def value(self, key: VariableKey) -> np.ndarray:
        if key not in self._offset:
            raise UnknownVariable(str(key))
        o = self._offset[key]
        return self._theta[o : o + key.dim] + self._delta[o : o + key.dim]

    def values(self) -> dict[VariableKey, np.ndarray]:
        return {k: self.value(k) for k in self._keys}

    def factor(self, fid: int) -> FactorRecord:
        return self._factors[fid].record

    def total_cost(self) -> float:
        """Exact cost of all factors at the current estimate."""
        return sum(self._exact_cost(self._factors[fid].record) for fid in sorted(self._factors))

    def marginal_cost(self, keys: Iterable[VariableKey]) -> float:
        keyset = set(keys)
        for k in keyset:
            if k not in self._offset:
                raise UnknownVariable(str(k))
        total = 0.0
        for fid in sorted(self._factors):
            rec = self._factors[fid].record
            if all(k in keyset for k in rec.keys):
                total += self._exact_cost(rec)
        return total

    # --- mutation ----------------------------------------------------------

    def add_variable(self, key: VariableKey, initial) -> None:
        self._add_variables([(key, initial)])

    def add_factor(self, record: FactorRecord) -> int:
        lin = self._linearize_new([record], {})[0]
        return self._commit_factor(lin)

    def remove_factor(self, fid: int) -> None:
        lin = self._factors.pop(fid)
        for k in lin.record.keys:
            self._touching[k].remove(fid)
        # re-adding the same record restores its id, and with it the summation order
        self._retired[id(lin.record)] = (fid, lin.record)
        self._rebuild_aggregates()

    def extend(self, variables: Sequence[tuple[VariableKey, object]], factors: Sequence[FactorRecord]) -> list[int]:
        """Atomically register new variables and factors."""
        pending = self._validate_variables(variables)
        lins = self._linearize_new(factors, pending)
        self._add_variables(variables, validated=pending)
        ids = [self._commit_factor(lin) for lin in lins]
        self.last_factor_ids = ids
        return ids

    def extend_and_solve(
        self,
        variables: Sequence[tuple[VariableKey, object]] = (),
        factors: Sequence[FactorRecord] = (),
        max_iterations: int = 100,
        tol: float = 1e-9,
    ) -> SolveReport:
        self.extend(variables, factors)
        return self.optimize(max_iterations, tol)

    def _validate_variables(self, variables) -> dict[VariableKey, np.ndarray]:
        pending: dict[VariableKey, np.ndarray] = {}
        for key, initial in variables:
            if not isinstance(key, VariableKey):
                raise InvalidKey(f"not a VariableKey: {key!r}")
            if key in self._offset or key in pending:
                raise DuplicateKey(str(key))
            vec = np.asarray(initial, dtype=float).reshape(-1)
            if vec.size != key.dim:
                raise DimensionMismatch(f"{key} expects {key.dim} values, got {vec.size}")
            if not np.all(np.isfinite(vec)):
                raise NonFiniteResidual(f"non-finite initial value for {key}")
            pending[key] = vec
        return pending

    def _add_variables(self, variables, validated=None) -> None:
        pending = validated if validated is not None else self._validate_variables(variables)
        if not pending:
            return
        new_keys = sorted(pending)
        in_order = not self._keys or new_keys[0] > self._keys[-1]
        need = self._n + sum(k.dim for k in new_keys)
        self._ensure_capacity(need)
        if in_order:
            for k in new_keys:
                o = self._n
                self._keys.append(k)
                self._offset[k] = o
                self._starts.append(o)
                self._theta[o : o + k.dim] = pending[k]
                self._delta[o : o + k.dim] = 0.0
                self._touching[k] = []
                self._n += k.dim
            return
        values = {k: (self._theta[self._offset[k] : self._offset[k] + k.dim].copy(),
                      self._delta[self._offset[k] : self._offset[k] + k.dim].copy()) for k in self._keys}
        for k in new_keys:
            values[k] = (pending[k], np.zeros(k.dim))
            self._touching[k] = []
        self._keys = sorted(values)
        self._offset = {}
        o = 0
        for k in self._keys:
            self._offset[k] = o
            self._theta[o : o + k.dim], self._delta[o : o + k.dim] = values[k]
            o += k.dim
        self._n = o
        self._starts = [self._offset[k] for k in self._keys]
        for lin in self._factors.values():
            lin.cols = self._cols(lin.record.keys)
            lin.hflat = None
        self._rebuild_aggregates()

    def _ensure_capacity(self, need: int) -> None:
        if need <= self._cap:
            return
        cap = self._cap
        while cap < need:
            cap *= 2
        for name in ("_theta", "_delta", "_v"):
            old = getattr(self, name)
            new = np.zeros(cap)
            new[: old.size] = old
            setattr(self, name, new)
        u = np.zeros((cap, self._bw + 1))
        u[: self._cap] = self._u
        self._u = u
        self._cap = cap

    def _cols(self, keys: Sequence[VariableKey]) -> np.ndarray:
        return np.concatenate([np.arange(self._offset[k], self._offset[k] + k.dim) for k in keys])

    def _linearize_new(self, records: Sequence[FactorRecord], pending: dict) -> list[_Linearized]:
        out = []
        for rec in records:
            vals = []
            for k in rec.keys:
                if k in pending:
                    vals.append(pending[k])
                elif k in self._offset:
                    o = self._offset[k]
                    vals.append(self._theta[o : o + k.dim].copy())
                else:
                    raise UnknownVariable(str(k))
            a, b = self._evaluate(rec, vals)
            out.append(_Linearized(rec, np.empty(0, dtype=int), a, b))
        return out

    @staticmethod
    def _evaluate(rec: FactorRecord, vals) -> tuple[np.ndarray, np.ndarray]:
        r = np.asarray(rec.residual(*vals), dtype=float).reshape(-1)
        if r.size != rec.dim:
            raise DimensionMismatch(f"{rec.label}: residual has {r.size} rows, covariance {rec.dim}")
        blocks = rec.jacobian(*vals)
        if len(blocks) != len(rec.keys):
            raise DimensionMismatch(f"{rec.label}: expected {len(rec.keys)} jacobian blocks")
        m = rec.dim
        j = np.empty((m, sum(k.dim for k in rec.keys)))
        c = 0
        for k, blk in zip(rec.keys, blocks):
            blk = np.asarray(blk, dtype=float)
            if blk.size != m * k.dim:
                raise DimensionMismatch(f"{rec.label}: jacobian block for {k} has {blk.size // m} columns")
            j[:, c : c + k.dim] = blk.reshape(m, k.dim)
            c += k.dim
        if not (np.isfinite(r).all() and np.isfinite(j).all()):
            raise NonFiniteResidual(f"{rec.label}: non-finite residual or jacobian")
        return rec.whitener @ j, rec.whitener @ r

    def _commit_factor(self, lin: _Linearized) -> int:
        retired = self._retired.pop(id(lin.record), None)
        if retired is not None and retired[1] is lin.record:
            fid = retired[0]
        else:
            fid = self._next_id
            self._next_id += 1
        lin.cols = self._cols(lin.record.keys)
        self._factors[fid] = lin
        for k in lin.record.keys:
            self._touching[k].append(fid)
            self._touching[k].sort()
        span = int(lin.cols.max() - lin.cols.min())
        if span > self._bw or fid < self._next_id - 1:
            self._bw = max(self._bw, span)
            self._rebuild_aggregates()
        else:
            self._scatter(lin, +1.0)
        return fid

    # --- aggregates --------------------------------------------------------

    def _index(self, lin: _Linearized) -> None:
        c = lin.cols
        p, q = np.nonzero(c[:, None] <= c[None, :])
        lin.gsel = (p, q)
        lin.hflat = c[q] * (self._bw + 1) + self._bw - (c[q] - c[p])
        lin.indexed_bw = self._bw

    def _scatter(self, lin: _Linearized, sign: float) -> None:
        if lin.hflat is None or lin.indexed_bw != self._bw:
            self._index(lin)
        g = lin.a.T @ lin.a
        flat = self._u.reshape(-1)
        flat[lin.hflat] += sign * g[lin.gsel]
        self._v[lin.cols] += sign * (lin.a.T @ lin.b)
        self._s += sign * float(lin.b @ lin.b)

    def _rebuild_aggregates(self) -> None:
        self._u = np.zeros((self._cap, self._bw + 1))
        self._v = np.zeros(self._cap)
        self._s = 0.0
        for fid in sorted(self._factors):
            self._scatter(self._factors[fid], +1.0)

    def _hess_vec(self, x: np.ndarray) -> np.ndarray:
        n, bw = self._n, self._bw
        u = self._u[:n]
        y = u[:, bw] * x
        for d in range(1, min(bw, n - 1) + 1):
            band = u[d:, bw - d]
            y[d:] += band * x[:-d]
            y[:-d] += band * x[d:]
        return y

    # --- evaluation helpers ----------------------------------------------------

    def _exact_cost(self, rec: FactorRecord, delta: np.ndarray | None = None) -> float:
        d = self._delta if delta is None else delta
        vals = [
            self._theta[self._offset[k] : self._offset[k] + k.dim] + d[self._offset[k] : self._offset[k] + k.dim]
            for k in rec.keys
        ]
        w = rec.whitened(*vals)
        if not np.all(np.isfinite(w)):
            raise NonFiniteResidual(f"{rec.label}: non-finite residual")
        return float(w @ w)

    def _moved_keys(self, delta: np.ndarray) -> list[VariableKey]:
        return self._moved_keys_above(self.relinearize_threshold, delta)

    def _moved_keys_above(self, threshold: float, delta: np.ndarray | None = None) -> list[VariableKey]:
        n = self._n
        delta = self._delta if delta is None else delta
        moved = np.abs(delta[:n]) > threshold
        if not moved.any():
            return []
        idx = np.flatnonzero(moved)
        out = []
        seen = set()
        starts = self._starts
        for i in idx:
            j = bisect.bisect_right(starts, int(i)) - 1
            k = self._keys[j]
            if k not in seen:
                seen.add(k)
                out.append(k)
        return out

    def _dirty_factors(self, keys: Sequence[VariableKey]) -> list[int]:
        fids = set()
        for k in keys:
            fids.update(self._touching[k])
        return sorted(fids)

    def _relinearize(self, keys: Sequence[VariableKey]) -> None:
        for k in keys:
            o = self._offset[k]
            self._theta[o : o + k.dim] += self._delta[o : o + k.dim]
            self._delta[o : o + k.dim] = 0.0
        dirty = self._dirty_factors(keys)
        # past half the graph a fresh summation is cheaper than patching the sums
        rebuild = 2 * len(dirty) > len(self._factors)
        for fid in dirty:
            lin = self._factors[fid]
            if not rebuild:
                self._scatter(lin, -1.0)
            vals = [self._theta[self._offset[k] : self._offset[k] + k.dim].copy() for k in lin.record.keys]
            lin.a, lin.b = self._evaluate(lin.record, vals)
            if not rebuild:
                self._scatter(lin, +1.0)
        if rebuild:
            self._rebuild_aggregates()

    # --- solve ----------------------------------------------------------------

    def _solve_step(self, lam: float, grad: np.ndarray) -> np.ndarray:
        n, bw = self._n, self._bw
        ab = self._u[:n].T.copy()
        diag = ab[bw].copy()
        if np.any(diag <= 0.0):
            bad = int(np.flatnonzero(diag <= 0.0)[0])
            j = bisect.bisect_right(self._starts, bad) - 1
            raise SingularNormalEquations(f"variable {self._keys[j]} is not constrained by any factor")
        ab[bw] = diag * (1.0 + lam)
        factor = cholesky_banded(ab, lower=False, check_finite=False)
        return cho_solve_banded((factor, False), -grad, check_finite=False)

    def _gradient_and_cost(self) -> tuple[np.ndarray, float]:
        n = self._n
        d = self._delta[:n]
        hd = self._hess_vec(d)
        v = self._v[:n]
        return v + hd, float(self._s + 2.0 * v @ d + d @ hd)

    def optimize(self, max_iterations: int = 100, tol: float = 1e-9) -> SolveReport:
        if not self._factors:
            raise SingularNormalEquations("graph has no factors")
        n = self._n
        # half-gradient H.delta + v of the quadratic model, kept current without matvecs
        grad, cost = self._gradient_and_cost()
        report = SolveReport(0, cost, cost, False, [cost])
        for it in range(1, max_iterations + 1):
            report.iterations = it
            while True:
                try:
                    step = self._solve_step(self._lambda, grad)
                    break
                except LinAlgError:
                    if self._lambda >= LAMBDA_MAX:
                        raise SingularNormalEquations("normal equations stay singular under maximum damping")
                    self._lambda = min(LAMBDA_MAX, max(10.0 * self._lambda, 1e-4))
            if not np.all(np.isfinite(step)):
                raise NonFiniteResidual("non-finite update")
            candidate = self._delta[:n] + step
            moved = self._moved_keys(candidate)
            dirty = self._dirty_factors(moved)
            # (H + lam D) step = -grad gives step' H step = -step' grad - lam step' D step
            d_step = self._u[:n, self._bw] * step
            cand_cost = cost + float(grad @ step) - self._lambda * float(step @ d_step)
            full = np.zeros(self._cap)
            full[:n] = candidate
            for fid in dirty:
                lin = self._factors[fid]
                r = lin.b + lin.a @ candidate[lin.cols]
                cand_cost += self._exact_cost(lin.record, full) - float(r @ r)
            step_norm = float(np.linalg.norm(step))
            if cand_cost <= cost:
                self._delta[:n] = candidate
                decrease = cost - cand_cost
                if moved:
                    self._relinearize(moved)
                    report.relinearized += len(moved)
                    grad, cost = self._gradient_and_cost()
                else:
                    grad = -self._lambda * d_step
                    cost = cand_cost
                report.cost_trace.append(cost)
                lam_used = self._lambda
                self._lambda = max(LAMBDA_MIN, self._lambda / 10.0)
                # with a linear model left behind, the next step can gain at most
                # about lam^2 step' D step; stop once that is below tolerance
                remaining = math.inf if moved else lam_used * lam_used * float(step @ d_step)
                if (
                    decrease <= tol * max(cost, 1e-300)
                    or remaining <= tol * max(cost, 1e-300)
                    or step_norm < 1e-10
                    or cost < 1e-300
                ):
                    report.converged = True
                    break
            else:
                if step_norm < 1e-10 or (cand_cost - cost) <= tol * max(cost, 1e-300):
                    report.converged = True
                    break
                if self._lambda >= LAMBDA_MAX:
                    break
                self._lambda = min(LAMBDA_MAX, max(10.0 * self._lambda, 1e-4))
        report.final_cost = cost
        return report

    def refine(
        self,
        max_iterations: int = 100,
        tol: float = 1e-9,
        step_tol: float = 1e-9,
        relinearize_threshold: float = 1e-3,
    ) -> SolveReport:
        """Relinearize every factor at the current estimate and iterate to convergence.

        Fluid relinearization leaves small displacements on stale linear
        models, and the running sums carry rounding from early, far-off
        linearizations; this pass removes both, so incremental and batch
        construction end at the same optimum. After the full relinearization
        the remaining moves are tiny, so later iterations only relinearize
        variables that move by more than ``relinearize_threshold`` (never more
        than the graph's own threshold). Along weakly constrained directions a
        micrometre changes the cost by less than its floating point
        resolution, so the last Gauss-Newton steps are accepted on step size
        rather than on cost.
        """
        moved = self._moved_keys_above(0.0)
        if moved:
            self._relinearize(moved)
        saved = self.relinearize_threshold
        self.relinearize_threshold = min(saved, float(relinearize_threshold))
        try:
            # re-sum from scratch: updates since the first, far-off linearization leave rounding residue
            self._rebuild_aggregates()
            report = self.optimize(max_iterations, tol)
            n = self._n
            for _ in range(5):
                grad, cost = self._gradient_and_cost()
                step = self._solve_step(LAMBDA_MIN, grad)
                size = float(np.abs(step).max()) if step.size else 0.0
                if not np.all(np.isfinite(step)) or size < step_tol:
                    break
                full = np.zeros(self._cap)
                full[:n] = self._delta[:n] + step
                moved = self._moved_keys(full[:n])
                if moved:
                    # a step that leaves the linear models is checked against the exact cost
                    new_cost = sum(self._exact_cost(self._factors[fid].record, full) for fid in sorted(self._factors))
                    if new_cost > cost * (1.0 + 1e-10) + 1e-300:  # beyond summation noise
                        break
                self._delta[:n] = full[:n]
                if moved:
                    self._relinearize(moved)
                    self._rebuild_aggregates()
                report.iterations += 1
                report.cost_trace.append(min(self._gradient_and_cost()[1], cost))
            report.final_cost = self._gradient_and_cost()[1]
            return report
        finally:
            self.relinearize_threshold = saved
