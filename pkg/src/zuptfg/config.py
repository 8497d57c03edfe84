"""Flat ``section.key=value`` configuration files mapped onto the run and scenario dataclasses."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping

from . import corenav, gnss, sim
from .pipeline import RunConfig


class ConfigError(ValueError):
    pass


# file key -> RunConfig field
RUN_KEYS = {
    "run.mode": "mode",
    "run.oracle_stops": "oracle_stops",
    "run.alignment_distance_m": "alignment_distance",
    "zupt.sigma_pos_m": "zupt_sigma",
    "process.sigma_pos_m": "process_sigma",
    "gnss.pseudorange_sigma_m": "pseudorange_sigma",
    "gnss.phase_sigma_m": "phase_sigma",
    "walk.tropo_sigma_m": "tropo_walk",
    "walk.clock_sigma_m": "clock_walk",
    "walk.phase_sigma_m": "phase_walk",
    "prior.position_sigma_m": "prior_position_sigma",
    "prior.clock_sigma_m": "prior_clock_sigma",
    "prior.tropo_mean_m": "prior_tropo_mean",
    "prior.tropo_sigma_m": "prior_tropo_sigma",
    "prior.phase_sigma_m": "prior_phase_sigma",
    "solver.relinearize_threshold": "relinearize_threshold",
    "solver.max_iterations": "max_iterations",
    "solver.batch": "batch",
}

_SKIP_COMPOSITE = {"noise", "lever", "site", "multipath", "waypoints", "stops", "name"}


def _scalar_fields(cls) -> dict[str, type]:
    out = {}
    defaults = cls() if cls is not sim.ScenarioConfig else None
    for f in dataclasses.fields(cls):
        if f.name in _SKIP_COMPOSITE or not f.init:
            continue
        if defaults is not None:
            out[f.name] = type(getattr(defaults, f.name))
        else:
            out[f.name] = f.type
    return out


def _parse_value(key: str, raw: str, kind) -> Any:
    raw = raw.strip()
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is str or kind == "str":
            return raw
        if kind in ("float | None",):
            return None if raw.lower() == "none" else float(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc


def parse(text: str, source: str = "<config>") -> dict[str, str]:
    """Read ``key=value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        if key not in known_keys():
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def load(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse(text, str(path))


def _run_field_types() -> dict[str, type]:
    d = RunConfig()
    return {name: type(getattr(d, name)) for name in RUN_KEYS.values()}


def _corenav_keys() -> dict[str, tuple[str, str, type]]:
    keys = {}
    for name, kind in _scalar_fields(corenav.CoreNavConfig).items():
        keys[f"corenav.{name}"] = ("corenav", name, kind)
    for name, kind in _scalar_fields(corenav.ImuNoise).items():
        keys[f"corenav.imu.{name}"] = ("imu", name, kind)
    keys["corenav.lever_arm_m"] = ("lever", "vector", tuple)
    return keys


def _sim_keys() -> dict[str, tuple[str, str, Any]]:
    keys: dict[str, tuple[str, str, Any]] = {"sim.preset": ("sim", "preset", str)}
    for name, kind in _scalar_fields(sim.ScenarioConfig).items():
        keys[f"sim.{name}"] = ("sim", name, kind)
    for name, kind in _scalar_fields(sim.SensorNoise).items():
        keys[f"sim.noise.{name}"] = ("noise", name, kind)
    for name, kind in _scalar_fields(gnss.MultipathModel).items():
        keys[f"multipath.{name}"] = ("multipath", name, kind)
    return keys


def known_keys() -> set[str]:
    return set(RUN_KEYS) | set(_corenav_keys()) | set(_sim_keys())


def _vector(key: str, raw: str) -> tuple[float, float, float]:
    parts = [p for p in raw.replace(",", " ").split()]
    if len(parts) != 3:
        raise ConfigError(f"{key}: expected three numbers")
    return tuple(_parse_value(key, p, float) for p in parts)  # type: ignore[return-value]


def run_config(values: Mapping[str, str] | None = None, **overrides) -> RunConfig:
    """RunConfig from file values, then keyword overrides (CLI flags) on top."""
    values = dict(values or {})
    types = _run_field_types()
    kwargs: dict[str, Any] = {}
    for key, field_name in RUN_KEYS.items():
        if key in values:
            kwargs[field_name] = _parse_value(key, values[key], types[field_name])
    cn_kwargs: dict[str, Any] = {}
    imu_kwargs: dict[str, Any] = {}
    lever = None
    for key, (target, name, kind) in _corenav_keys().items():
        if key not in values:
            continue
        if target == "lever":
            lever = corenav.LeverArm(_vector(key, values[key]))
        elif target == "imu":
            imu_kwargs[name] = _parse_value(key, values[key], kind)
        else:
            cn_kwargs[name] = _parse_value(key, values[key], kind)
    if imu_kwargs:
        cn_kwargs["noise"] = corenav.ImuNoise(**imu_kwargs)
    if lever is not None:
        cn_kwargs["lever"] = lever
    if cn_kwargs:
        kwargs["corenav"] = corenav.CoreNavConfig(**cn_kwargs)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def scenario_config(
    values: Mapping[str, str] | None = None, preset: str | None = None, seed: int | None = None
) -> sim.ScenarioConfig:
    values = dict(values or {})
    keys = _sim_keys()
    name = preset or values.get("sim.preset", "test1")
    kwargs: dict[str, Any] = {}
    noise: dict[str, Any] = {}
    mp: dict[str, Any] = {}
    for key, (target, field_name, kind) in keys.items():
        if key not in values or key == "sim.preset":
            continue
        v = _parse_value(key, values[key], kind)
        {"sim": kwargs, "noise": noise, "multipath": mp}[target][field_name] = v
    if noise:
        kwargs["noise"] = sim.SensorNoise(**noise)
    if mp:
        kwargs["multipath"] = gnss.MultipathModel(**mp)
    if seed is not None:
        kwargs["seed"] = seed
    s = kwargs.pop("seed", 0)
    try:
        return sim.preset(name, seed=s, **kwargs)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc).strip("'\"")) from exc


def defaults_text() -> str:
    """Every configurable key with its default, in file syntax."""
    lines = []
    rc = RunConfig()
    for key, field_name in RUN_KEYS.items():
        lines.append(f"{key}={_fmt(getattr(rc, field_name))}")
    cn = rc.corenav
    for key, (target, name, _) in sorted(_corenav_keys().items()):
        obj = {"corenav": cn, "imu": cn.noise, "lever": cn.lever}[target]
        v = getattr(obj, name)
        lines.append(f"{key}={','.join(_fmt(x) for x in v) if target == 'lever' else _fmt(v)}")
    sc = sim.preset("test1")
    lines.append("sim.preset=test1")
    for key, (target, name, _) in sorted(_sim_keys().items()):
        if key == "sim.preset":
            continue
        obj = {"sim": sc, "noise": sc.noise, "multipath": sc.multipath}[target]
        lines.append(f"{key}={_fmt(getattr(obj, name))}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(float(v))
    if hasattr(v, "__iter__") and not isinstance(v, str):
        return ",".join(_fmt(float(x)) for x in v)
    return str(v)
