import math

import numpy as np
import pytest

from zuptfg import geodesy, io, sim
from zuptfg.errors import InfeasibleSchedule
from zuptfg.records import EpochRecord, RawObservation


@pytest.mark.parametrize("name, length, stops", [("test1", 671.0, 9), ("test2", 652.0, 19), ("test3", 663.0, 20)])
def test_presets(name, length, stops):
    tr = sim.generate_trajectory(sim.preset(name))
    assert tr.path_length == pytest.approx(length, abs=5.0)
    assert len(tr.stops) == stops
    assert tr.arc_length[-1] == pytest.approx(tr.path_length, abs=1e-6)


def test_preset_accepts_like_suffix():
    assert sim.preset("test1-like").name == "test1"
    with pytest.raises(KeyError):
        sim.preset("test9")


def test_no_waypoints_beyond_start_is_all_stationary():
    tr = sim.generate_trajectory(sim.ScenarioConfig(waypoints=((0.0, 0.0),), duration=20.0))
    assert tr.path_length == 0.0
    assert np.all(tr.velocity == 0.0)
    assert tr.stationary.all()


def _analytic(cfg):
    path = sim.Path(cfg.waypoints, cfg.corner_radius)
    profile, _ = sim.build_schedule(cfg, path.length)

    def position(t):
        s, _, _ = profile.evaluate(np.atleast_1d(t))
        return path.evaluate(s)[0]

    return position


def test_velocity_zero_in_stops_and_consistent_with_position():
    cfg = sim.preset("test1")
    tr = sim.generate_trajectory(cfg)
    for a, d in tr.stops:
        m = (tr.t >= a) & (tr.t <= a + d)
        assert m.sum() >= int(d * cfg.imu_rate)
        assert np.all(tr.velocity[m] == 0.0)
    position = _analytic(cfg)
    np.testing.assert_allclose(position(tr.t), tr.position[:, :2], atol=1e-9)
    h = 1e-6
    moving = tr.t[tr.speed > 0]
    fd = (position(moving + h) - position(moving - h)) / (2 * h)
    np.testing.assert_allclose(fd, tr.velocity[tr.speed > 0, :2], atol=1e-6)


def test_position_continuous_at_scale_of_sampling():
    tr = sim.generate_trajectory(sim.preset("test2"))
    step = np.linalg.norm(np.diff(tr.position, axis=0), axis=1)
    assert step.max() <= 1.5 * 1.2 / 100 + 1e-9


def test_stationary_flags_match_schedule():
    cfg = sim.preset("test3")
    tr = sim.generate_trajectory(cfg)
    expected = (tr.t <= cfg.idle_start) | (tr.t >= tr.t[-1] - cfg.idle_end)
    for a, d in tr.stops:
        expected |= (tr.t >= a) & (tr.t <= a + d)
    np.testing.assert_array_equal(tr.stationary, expected)


@pytest.mark.parametrize(
    "kw",
    [
        dict(n_stops=9, duration=100.0),
        dict(stops=((30.0, 10.0), (35.0, 10.0)), duration=700.0),
        dict(stops=((30.0, 10.0),), duration=None),
        dict(stops=((5.0, 10.0),), duration=700.0),
        dict(stops=((30.0, -1.0),), duration=700.0),
    ],
)
def test_infeasible_schedules(kw):
    with pytest.raises(InfeasibleSchedule):
        sim.generate_trajectory(sim.preset("test1", **kw))


def test_explicit_stop_schedule():
    cfg = sim.preset("test1", n_stops=0, stops=((100.0, 20.0), (300.0, 5.0)), duration=800.0)
    tr = sim.generate_trajectory(cfg)
    assert tr.t[-1] == pytest.approx(800.0)
    assert tr.stationary[(tr.t > 100.0) & (tr.t < 120.0)].all()
    assert tr.arc_length[-1] == pytest.approx(671.0, abs=5.0)


def test_config_validation():
    with pytest.raises(ValueError):
        sim.preset("test1", multipath_fraction=1.5)
    with pytest.raises(ValueError):
        sim.preset("test1", imu_rate=100, encoder_rate=30)


def _as_json(records):
    return [io.record_to_json(r) for r in records]


def test_same_seed_identical_streams():
    a, ca, la = sim.simulate(sim.preset("test1", seed=4), noisy=True)
    b, cb, lb = sim.simulate(sim.preset("test1", seed=4), noisy=True)
    assert _as_json(a.records) == _as_json(b.records)
    assert _as_json(ca) == _as_json(cb)
    assert la == lb
    c, _, _ = sim.simulate(sim.preset("test1", seed=5))
    assert _as_json(c.records) != _as_json(a.records)


@pytest.fixture(scope="module")
def test1():
    return sim.simulate(sim.preset("test1", seed=3), noisy=True)


def test_static_specific_force_is_gravity_reaction(test1):
    scenario, _, _ = test1
    cfg = scenario.config
    noise = cfg.noise
    dt = 1.0 / cfg.imu_rate
    g = geodesy.normal_gravity(cfg.site.lat, cfg.site.height + sim.LEVER_ARM[2])
    ba = scenario.biases[0]
    imu = [s for r in scenario.records for s in r.imu]
    t = np.array([s.t for s in imu])
    f = np.array([s.f for s in imu])
    tr = scenario.truth
    for a, d in tr.stops:
        # samples whose whole interval lies inside the stop
        m = (t > a + dt) & (t <= a + d)
        n = int(m.sum())
        white = noise.vrw / math.sqrt(dt) / math.sqrt(n)
        walk = noise.accel_bias_walk * math.sqrt(a + d)
        bound = 3.0 * math.hypot(white, walk)
        assert np.all(np.abs(f[m].mean(axis=0) - (np.array([0.0, 0.0, g]) + ba)) < bound)


def test_encoders_zero_in_stops_and_match_speed_otherwise():
    cfg = sim.preset("test1", noise=sim.SensorNoise.zero())
    scenario, _, _ = sim.simulate(cfg)
    tr = scenario.truth
    for e in (e for r in scenario.records for e in r.enc):
        m = (tr.t >= e.t - e.tau - 1e-9) & (tr.t <= e.t + 1e-9)
        if tr.stationary[m].all():
            assert e.v_lon == 0.0 and e.yaw_rate == 0.0
        else:
            v, tt = tr.speed[m], tr.t[m]
            mean_speed = float(np.sum(0.5 * (v[1:] + v[:-1]) * np.diff(tt))) / e.tau
            assert e.v_lon == pytest.approx(mean_speed, abs=1e-3)


def test_epoch_records(test1):
    scenario, _, _ = test1
    t = [r.t for r in scenario.records]
    assert all(b > a for a, b in zip(t, t[1:]))
    assert all(r.imu for r in scenario.records)
    assert all(len(r.gnss) >= 6 for r in scenario.records)
    assert [r.epoch for r in scenario.records] == list(range(len(t)))


def test_injection_fraction_zero_is_identity(test1):
    scenario, _, _ = test1
    out, log = sim.inject_multipath(scenario.records, 0.0, np.random.default_rng(0), scenario.elevations)
    assert log == []
    assert _as_json(out) == _as_json(scenario.records)


def test_injection_counts_exactly():
    sats = range(1, 11)
    records = [EpochRecord(k, float(k), [RawObservation(s, 2.1e7, 2.1e7) for s in sats]) for k in range(1000)]
    elev = {(k, s): math.radians(10 + 7 * s) for k in range(1000) for s in sats}
    out, log = sim.inject_multipath(records, 0.02, np.random.default_rng(1), elev)
    assert len(log) == 200
    hit = {(e.epoch, e.sat) for e in log}
    assert len(hit) == 200
    changed = {(r.epoch, o.sat) for r in out for o in r.gnss if o.pr_m != 2.1e7}
    assert changed == hit
    # the input records are untouched
    assert all(o.pr_m == 2.1e7 for r in records for o in r.gnss)


def test_injection_fraction_domain():
    with pytest.raises(ValueError):
        sim.inject_multipath([], 1.1, np.random.default_rng(0), {})


def test_corruption_magnitudes(test1):
    scenario, corrupted, log = test1
    assert len(log) == math.floor(0.02 * scenario.observation_count)
    assert max(abs(e.range_error) for e in log) > 1.0
    assert max(abs(e.phase_error) for e in log) < 0.1
    for e in log:
        clean = next(o for o in scenario.records[e.epoch].gnss if o.sat == e.sat)
        dirty = next(o for o in corrupted[e.epoch].gnss if o.sat == e.sat)
        assert dirty.pr_m - clean.pr_m == pytest.approx(e.range_error, abs=1e-6)
        assert dirty.cp_m - clean.cp_m == pytest.approx(e.phase_error, abs=1e-6)


def test_stationary_intervals_helper():
    assert sim.stationary_intervals([True, True, False, True, False, False, True]) == [(0, 1), (3, 3), (6, 6)]
    assert sim.stationary_intervals([]) == []
