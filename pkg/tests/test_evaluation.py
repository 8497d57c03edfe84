import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zuptfg import evaluation, geodesy
from zuptfg.errors import EmptySeries, EpochMismatch
from zuptfg.evaluation import ErrorSeries, MetricsRow, Trajectory

SITE = geodesy.GeodeticPosition.from_degrees(39.7334, -79.9014, 290.0)
ROT = geodesy.rotation_ecef_to_enu(SITE)


def _truth(n=20, seed=0):
    rng = np.random.default_rng(seed)
    enu = np.cumsum(rng.normal(0, 1.0, (n, 3)), axis=0)
    return Trajectory(np.arange(n, dtype=float), np.array([geodesy.enu_to_ecef(e, SITE) for e in enu]))


def test_identity_gives_zero_errors():
    tr = _truth()
    s = evaluation.error_series(tr, tr)
    np.testing.assert_array_equal(s.enu, 0.0)
    row = evaluation.metrics(s)
    assert row.values() == (0.0,) * 5


@pytest.mark.parametrize("offset", [(0.0, 0.0, 1.0), (0.6, 0.8, 0.0), (-2.0, 1.0, 0.5)])
def test_constant_enu_offset(offset):
    tr = _truth()
    est = Trajectory(tr.t, tr.positions + ROT.T @ np.array(offset))
    s = evaluation.error_series(est, tr, SITE)
    np.testing.assert_allclose(s.enu, np.tile(offset, (len(tr), 1)), atol=1e-9)


def test_default_origin_is_first_truth_position():
    tr = _truth()
    est = Trajectory(tr.t, tr.positions + ROT.T @ np.array([0.0, 0.0, 1.0]))
    s = evaluation.error_series(est, tr)
    # the first truth point lies within metres of SITE, so the frames agree closely
    np.testing.assert_allclose(s.enu[:, 2], 1.0, atol=1e-5)


@pytest.mark.parametrize("shift", [1e-3, 1.0])
def test_epoch_mismatch(shift):
    tr = _truth()
    with pytest.raises(EpochMismatch):
        evaluation.error_series(Trajectory(tr.t + shift, tr.positions), tr)
    with pytest.raises(EpochMismatch):
        evaluation.error_series(Trajectory(tr.t[:-1], tr.positions[:-1]), tr)


def test_trajectory_length_check():
    with pytest.raises(EpochMismatch):
        Trajectory(np.arange(3.0), np.zeros((2, 3)))


def test_three_four_five():
    s = ErrorSeries(np.arange(4.0), np.tile([0.6, 0.8, 0.0], (4, 1)))
    row = evaluation.metrics(s, "x")
    assert (row.rmse_e, row.rmse_n, row.rmse_u) == pytest.approx((0.6, 0.8, 0.0))
    assert row.rmse_3d == pytest.approx(1.0)
    assert row.max_norm == pytest.approx(1.0)


def test_two_sample_hand_computation():
    row = evaluation.metrics(ErrorSeries(np.array([0.0, 1.0]), np.array([[1.0, 0, 0], [0, 0, 3.0]])))
    assert row.rmse_3d == pytest.approx(math.sqrt(5.0), abs=1e-12)
    assert row.max_norm == 3.0


def test_empty_series():
    with pytest.raises(EmptySeries):
        evaluation.metrics(ErrorSeries(np.zeros(0), np.zeros((0, 3))))


series_arrays = arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=st.floats(-100, 100))


@settings(max_examples=200, deadline=None)
@given(series_arrays)
def test_metric_identities(e):
    row = evaluation.metrics(ErrorSeries(np.arange(len(e), dtype=float), e))
    total = row.rmse_e**2 + row.rmse_n**2 + row.rmse_u**2
    assert row.rmse_3d**2 == pytest.approx(total, rel=1e-12, abs=1e-300)
    assert row.rmse_3d >= max(row.rmse_e, row.rmse_n, row.rmse_u) * (1 - 1e-12)
    assert row.max_norm >= row.rmse_3d * (1 - 1e-12)


@settings(max_examples=100, deadline=None)
@given(series_arrays, st.randoms(use_true_random=False))
def test_metrics_permutation_invariant(e, rnd):
    idx = list(range(len(e)))
    rnd.shuffle(idx)
    a = evaluation.metrics(ErrorSeries(np.arange(len(e), dtype=float), e))
    b = evaluation.metrics(ErrorSeries(np.arange(len(e), dtype=float), e[idx]))
    assert a.values() == pytest.approx(b.values(), rel=1e-12, abs=1e-12)


def _row(name, rmse_3d, **kw):
    base = dict(rmse_e=1.0, rmse_n=1.0, rmse_u=1.0, max_norm=5.0)
    base.update(kw)
    return MetricsRow(name, rmse_3d=rmse_3d, **base)


def test_compare_flags_minimum():
    rows = [_row("L2", 3.97), _row("L2-ZUPT", 2.20), _row("L2-CN", 3.49)]
    table = evaluation.compare(rows)
    col = evaluation.METRIC_COLUMNS.index("rmse_3d")
    assert [f[col] for f in table.best] == [False, True, False]


def test_compare_ties_flag_jointly():
    rows = [_row("a", 1.0), _row("b", 1.0), _row("c", 1.0)]
    table = evaluation.compare(rows)
    assert all(all(f) for f in table.best)


def test_compare_flagged_rows_attain_minimum():
    rng = np.random.default_rng(3)
    rows = [MetricsRow(f"m{i}", *rng.uniform(0, 5, 5)) for i in range(6)]
    table = evaluation.compare(rows)
    vals = np.array([r.values() for r in rows])
    for c in range(5):
        flagged = [i for i, f in enumerate(table.best) if f[c]]
        assert flagged and all(vals[i, c] == vals[:, c].min() for i in flagged)


def test_compare_needs_two_rows():
    with pytest.raises(ValueError):
        evaluation.compare([_row("a", 1.0)])


def test_render_and_csv_layout():
    table = evaluation.compare([_row("L2", 3.97), _row("L2-ZUPT", 2.20)])
    text = table.render()
    header = text.splitlines()[0].split()
    assert header == ["method", "E", "N", "U", "3D", "MaxNorm"]
    assert "2.200*" in text and "3.970*" not in text
    csv_lines = evaluation.comparison_csv(table).splitlines()
    assert csv_lines[0].startswith("method,E,N,U,3D,MaxNorm")


def test_csv_round_trips(tmp_path):
    s = ErrorSeries(np.array([0.0, 1.0, 2.0]), np.array([[0.1, 0.2, 0.3], [1.0 / 3, -2.0, 0.0], [5e-9, 0, 1]]))
    evaluation.write_error_series(tmp_path / "e.csv", s)
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "t,e_east,e_north,e_up"
    back = evaluation.read_error_series(tmp_path / "e.csv")
    np.testing.assert_array_equal(back.enu, s.enu)
    rows = [evaluation.metrics(s, "m")]
    evaluation.write_metrics(tmp_path / "m.csv", rows)
    assert evaluation.read_metrics(tmp_path / "m.csv") == rows


def test_read_metrics_missing_columns(tmp_path):
    (tmp_path / "bad.csv").write_text("method,rmse_e\nx,1\n")
    with pytest.raises(ValueError):
        evaluation.read_metrics(tmp_path / "bad.csv")
