import json

import numpy as np
import pytest

from zuptfg import io, sim


@pytest.fixture(scope="module")
def scenario():
    return sim.simulate(sim.preset("test1", seed=2, idle_end=5.0), noisy=True)


def test_dataset_round_trip(tmp_path, scenario):
    sc, _, _ = scenario
    path = tmp_path / io.DATASET
    io.write_dataset(path, sc.records)
    back = io.read_dataset(path)
    assert [io.record_to_json(r) for r in back] == [io.record_to_json(r) for r in sc.records]
    io.write_dataset(tmp_path / "again.jsonl", back)
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()


def test_dataset_schema(tmp_path, scenario):
    sc, _, _ = scenario
    io.write_dataset(tmp_path / io.DATASET, sc.records[:3])
    lines = (tmp_path / io.DATASET).read_text().splitlines()
    assert len(lines) == 3
    d = json.loads(lines[1])
    assert set(d) == {"epoch", "t", "gnss", "imu", "enc", "truth"}
    assert set(d["gnss"][0]) == {"sat", "pr_m", "cp_m"}
    assert set(d["imu"][0]) == {"t", "f", "w"} and len(d["imu"][0]["f"]) == 3
    assert {"v_lon", "yaw_rate", "tau"} <= set(d["enc"][0])
    assert set(d["truth"]) == {"p_ecef", "v_enu", "stationary"}


def test_single_encoder_object_accepted():
    rec = io.record_from_json(
        {"epoch": 0, "t": 1.0, "gnss": [], "imu": [], "enc": {"v_lon": 1.0, "yaw_rate": 0.0, "tau": 0.1}}
    )
    assert len(rec.enc) == 1 and rec.enc[0].t == 1.0
    assert rec.truth is None


@pytest.mark.parametrize(
    "text",
    ["{not json}\n", '{"t": 1.0}\n', '{"epoch": 0, "t": 0, "gnss": [{"sat": 1}]}\n', "\n\n"],
)
def test_malformed_dataset(tmp_path, text):
    (tmp_path / "d.jsonl").write_text(text)
    with pytest.raises(io.DatasetError):
        io.read_dataset(tmp_path / "d.jsonl")


def test_missing_files(tmp_path):
    with pytest.raises(io.DatasetError):
        io.read_dataset(tmp_path / "none.jsonl")
    with pytest.raises(io.DatasetError):
        io.read_ephemeris(tmp_path / "none.json")
    with pytest.raises(io.DatasetError):
        io.read_trajectory(tmp_path / "none.csv")


def test_ephemeris_round_trip(tmp_path, scenario):
    sc, _, _ = scenario
    io.write_ephemeris(tmp_path / io.EPHEMERIS, sc.constellation)
    assert io.read_ephemeris(tmp_path / io.EPHEMERIS) == sc.constellation
    (tmp_path / "bad.json").write_text('[{"sat": 1}]')
    with pytest.raises(io.DatasetError):
        io.read_ephemeris(tmp_path / "bad.json")


def test_truth_and_trajectory_csv(tmp_path, scenario):
    sc, _, _ = scenario
    io.write_truth(tmp_path / io.TRUTH, sc.records)
    truth = io.read_trajectory(tmp_path / io.TRUTH)
    ref = io.truth_from_records(sc.records)
    np.testing.assert_array_equal(truth.t, ref.t)
    np.testing.assert_array_equal(truth.positions, ref.positions)
    io.write_trajectory(tmp_path / "traj.csv", ref.t, ref.positions)
    assert (tmp_path / "traj.csv").read_text().splitlines()[0] == "epoch,t,x,y,z"
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(io.DatasetError):
        io.read_trajectory(tmp_path / "bad.csv")


def test_corruption_log_round_trip(tmp_path, scenario):
    _, _, log = scenario
    io.write_corruption_log(tmp_path / io.CORRUPTION_LOG, log)
    back = io.read_corruption_log(tmp_path / io.CORRUPTION_LOG)
    assert len(back) == len(log)
    for a, b in zip(back, log):
        assert (a.epoch, a.sat, a.range_error, a.phase_error) == (b.epoch, b.sat, b.range_error, b.phase_error)
        assert a.elevation == pytest.approx(b.elevation, abs=1e-15)


def test_truth_required(tmp_path):
    rec = io.record_from_json({"epoch": 0, "t": 0.0})
    with pytest.raises(io.DatasetError):
        io.write_truth(tmp_path / "t.csv", [rec])
