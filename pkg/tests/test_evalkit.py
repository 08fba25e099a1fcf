import numpy as np
import pytest

from magjoint import dvbf, evalkit, lstm, simkit
from magjoint import rotation as rot
from magjoint.errors import StatsMismatch


@pytest.fixture(scope="module")
def data():
    ds = simkit.generate_dataset(simkit.SensorRig.default(), simkit.JointLimits(), 2400, simkit.NoiseSpec(0.05), 31)
    return ds.slice(0, 1680), ds.slice(1680, 2040), ds.slice(2040, 2400)


@pytest.fixture(scope="module")
def models(data):
    train, val, _ = data
    lm, _ = lstm.train_lstm(train, val, lstm.LstmConfig(epochs=2, seed=1))
    dm, _ = dvbf.train_dvbf(train, val, dvbf.DvbfConfig(epochs=2, seq_len=16, val_sequences=4, seed=1))
    return lm, dm


def test_oracle_model_has_zero_error(data):
    rep = evalkit.evaluate(evalkit.OracleModel(), data[2])
    assert rep.euler_mse == 0.0 and rep.mean_geodesic == 0.0
    np.testing.assert_array_equal(rep.per_axis_mse, np.zeros(3))


def test_identity_model_error_is_euler_second_moment(data):
    test = data[2]
    rep = evalkit.evaluate(evalkit.ConstantModel(), test)
    e = rot.rotation_to_euler(test.y)
    np.testing.assert_allclose(rep.per_axis_mse, np.mean(e**2, axis=0), rtol=1e-12)
    np.testing.assert_allclose(rep.per_axis_rmse, np.sqrt(np.mean(e**2, axis=0)), rtol=1e-12)
    assert rep.mean_geodesic > 0


def test_series_lengths_and_warmup(data, models):
    test = data[2]
    lm, dm = models
    lr, dr = evalkit.evaluate(lm, test), evalkit.evaluate(dm, test)
    assert lr.warmup == lm.window - 1 and len(lr.t) == len(test) - lr.warmup
    assert dr.warmup == 1 and len(dr.t) == len(test) - 1
    assert lr.method == "lstm" and dr.method == "dvbf"
    for rep in (lr, dr):
        assert rep.euler_err.shape == (len(rep.t), 3) and len(rep.geodesic_err) == len(rep.t)
        assert np.all(rep.per_axis_mse >= 0)


def test_evaluate_is_deterministic(data, models):
    a = evalkit.evaluate(models[1], data[2])
    b = evalkit.evaluate(models[1], data[2])
    np.testing.assert_array_equal(a.poses, b.poses)
    assert a.summary() == b.summary()


def test_stats_mismatch(data, models):
    lm = models[0]
    other = simkit.generate_dataset(simkit.SensorRig.default(), simkit.JointLimits(), 300, simkit.NoiseSpec(0.05), 99)
    with pytest.raises(StatsMismatch):
        evalkit.evaluate(lm, other)


def test_zero_spike_changes_nothing(data, models):
    rep = evalkit.spike_experiment(*models, data[2], magnitude=0.0, count=5, horizon=20)
    np.testing.assert_array_equal(rep.lstm_peak, 0.0)
    np.testing.assert_array_equal(rep.dvbf_peak, 0.0)


def test_spike_baseline_matches_evaluate(data, models):
    test = data[2]
    rep = evalkit.spike_experiment(*models, test, count=4, horizon=20)
    np.testing.assert_array_equal(rep.lstm_clean, evalkit.evaluate(models[0], test).poses)
    np.testing.assert_array_equal(rep.dvbf_clean, evalkit.evaluate(models[1], test).poses)
    assert len(rep.locations) == 4 and np.all(rep.lstm_peak > 0)
    assert rep.ratio == pytest.approx(rep.dvbf_mean / rep.lstm_mean)


def test_spike_on_all_sensors_weakens_damping(data, models):
    test = data[2]
    one = evalkit.spike_experiment(*models, test, sensors=(0,), count=6, horizon=30)
    every = evalkit.spike_experiment(*models, test, sensors=(0, 1, 2, 3), count=6, horizon=30)
    assert every.dvbf_mean > one.dvbf_mean


def test_report_files_round_trip(tmp_path, data, models):
    rep = evalkit.evaluate(models[0], data[2])
    evalkit.write_report(tmp_path, rep)
    summary = evalkit.read_summary(tmp_path / "lstm_summary.txt")
    assert float(summary["mean_geodesic"]) == rep.mean_geodesic
    assert int(summary["warmup"]) == rep.warmup
    lines = (tmp_path / "lstm_series.csv").read_text().splitlines()
    assert lines[0] == evalkit.SERIES_FORMAT
    assert len(lines) == 2 + len(rep.t)
    spike = evalkit.spike_experiment(*models, data[2], count=3, horizon=10)
    evalkit.write_spike_report(tmp_path, spike)
    s = evalkit.read_summary(tmp_path / "spike_summary.txt")
    assert float(s["dvbf_lstm_ratio"]) == spike.ratio
    assert len((tmp_path / "spike_peaks.csv").read_text().splitlines()) == 5
