from dataclasses import replace

import numpy as np
import pytest

from zuptfg import evaluation, io, pipeline, sim
from zuptfg.graph import position_key
from zuptfg.records import EpochRecord


def _rmse(scenario, result):
    truth = io.truth_from_records(scenario.records)
    est = evaluation.Trajectory(result.t, result.positions)
    return evaluation.metrics(evaluation.error_series(est, truth)).rmse_3d


@pytest.fixture(scope="module")
def short_clean():
    cfg = sim.ScenarioConfig(waypoints=((0, 0), (60, 0), (60, 20)), n_stops=1, seed=3, noise=sim.SensorNoise.zero())
    return sim.simulate(cfg)[0]


@pytest.fixture(scope="module")
def short_noisy():
    cfg = sim.ScenarioConfig(waypoints=((0, 0), (60, 0), (60, 20)), n_stops=1, seed=5)
    return sim.simulate(cfg, noisy=True)


@pytest.mark.parametrize("mode", pipeline.MODES)
def test_noise_free_recovery(short_clean, mode):
    # with the troposphere prior at the simulated zenith delay every factor is exact
    cfg = pipeline.RunConfig(mode=mode, prior_tropo_mean=short_clean.config.tropo_zenith)
    result = pipeline.run(short_clean.records, short_clean.constellation, cfg)
    assert _rmse(short_clean, result) < 1e-2
    if mode != "l2-cn":
        assert _rmse(short_clean, result) < 1e-3


def test_all_stationary_zupt_pins_trajectory():
    scenario, _, _ = sim.simulate(sim.ScenarioConfig(waypoints=((0.0, 0.0),), duration=60.0, seed=2))
    result = pipeline.run(scenario.records, scenario.constellation, pipeline.RunConfig(mode="l2-zupt"))
    assert result.zupt_pairs > 0
    drift = np.linalg.norm(result.positions - result.positions[0], axis=1)
    assert drift.max() < 0.05


def test_l2cn_needs_proprioceptive_data(short_clean):
    bare = [EpochRecord(r.epoch, r.t, r.gnss, truth=r.truth) for r in short_clean.records]
    with pytest.raises(pipeline.MissingProprioceptiveData, match="missing proprioceptive data"):
        pipeline.run(bare, short_clean.constellation, pipeline.RunConfig(mode="l2-cn"))
    # the GNSS-only mode does not need them
    pipeline.run(bare[:20], short_clean.constellation, pipeline.RunConfig(mode="l2"))


def test_zupt_without_detected_stops_equals_l2():
    cfg = sim.ScenarioConfig(waypoints=((0.0, 0.0), (80.0, 0.0)), idle_start=0.0, idle_end=0.0, seed=4)
    scenario, _, _ = sim.simulate(cfg)
    a = pipeline.run(scenario.records, scenario.constellation, pipeline.RunConfig(mode="l2"))
    b = pipeline.run(scenario.records, scenario.constellation, pipeline.RunConfig(mode="l2-zupt"))
    assert b.zupt_pairs == 0 and not any(b.stationary)
    np.testing.assert_allclose(b.positions, a.positions, rtol=0, atol=1e-9)


@pytest.mark.parametrize("mode", pipeline.MODES)
def test_batch_equals_incremental(short_noisy, mode):
    _, corrupted, _ = short_noisy
    scenario = short_noisy[0]
    inc = pipeline.run(corrupted, scenario.constellation, pipeline.RunConfig(mode=mode))
    bat = pipeline.run(corrupted, scenario.constellation, pipeline.RunConfig(mode=mode, batch=True))
    np.testing.assert_allclose(inc.positions, bat.positions, rtol=0, atol=1e-6)


def test_deterministic(short_noisy):
    scenario, corrupted, _ = short_noisy
    cfg = pipeline.RunConfig(mode="l2-cn")
    a = pipeline.run(corrupted, scenario.constellation, cfg)
    b = pipeline.run(corrupted, scenario.constellation, cfg)
    assert a.positions.tobytes() == b.positions.tobytes()
    assert a.stationary == b.stationary


def test_oracle_stops_use_truth_flags(short_noisy):
    scenario, _, _ = short_noisy
    cfg = pipeline.RunConfig(mode="l2-zupt", oracle_stops=True)
    result = pipeline.run(scenario.records, scenario.constellation, cfg)
    assert result.stationary == [bool(r.truth.stationary) for r in scenario.records]


def test_result_layout(short_clean):
    result = pipeline.run(short_clean.records[:30], short_clean.constellation)
    assert result.positions.shape == (30, 3)
    assert result.online.shape == (30, 3)
    assert len(result.reports) == 31
    np.testing.assert_array_equal(result.positions[-1], result.graph.value(position_key(29)))


def test_empty_dataset_rejected(short_clean):
    with pytest.raises(ValueError):
        pipeline.run([], short_clean.constellation)


def test_invalid_mode():
    with pytest.raises(ValueError):
        pipeline.RunConfig(mode="l3")
    with pytest.raises(ValueError):
        replace(pipeline.RunConfig(), mode="zupt")
