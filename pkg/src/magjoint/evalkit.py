"""Accuracy metrics and the spike-robustness comparison."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dvbf, lstm
from . import rotation as rot
from .errors import StatsMismatch

SERIES_FORMAT = "# magjoint-eval-series v1"
SUMMARY_FORMAT = "# magjoint-eval-summary v1"
SPIKE_FORMAT = "# magjoint-spike v1"


class OracleModel:
    """Debug model that returns the ground truth."""

    name = "oracle"
    stats = None

    def predict_stream(self, ds):
        return np.array(ds.y, copy=True), 0


class ConstantModel:
    """Always predicts the same rotation (identity by default)."""

    name = "constant"
    stats = None

    def __init__(self, pose=None):
        self.pose = np.eye(3) if pose is None else np.asarray(pose, dtype=float)

    def predict_stream(self, ds):
        return np.broadcast_to(self.pose, (len(ds), 3, 3)).copy(), 0


def predict_stream(model, ds, x=None):
    """Poses for every step after warm-up; returns ``(poses, warmup)``.

    ``x`` overrides the dataset's frames (used to inject spikes).
    """
    x = ds.x if x is None else x
    if isinstance(model, lstm.LstmRegressor):
        windows = lstm.sliding_windows(x, model.window)
        return model.predict_batch(windows), model.window - 1
    if isinstance(model, dvbf.DvbfModel):
        return dvbf.run_filter(model, x, ds.u)[1:], 1
    return model.predict_stream(ds)


def check_stats(model, ds):
    ms = getattr(model, "stats", None)
    if ms is not None and ds.stats is not None and not ms.matches(ds.stats):
        raise StatsMismatch("model and dataset standardization statistics differ")


@dataclass
class EvalReport:
    method: str
    warmup: int
    t: np.ndarray
    euler_err: np.ndarray  # (N, 3) wrapped prediction - truth, radians
    geodesic_err: np.ndarray  # (N,)
    poses: np.ndarray = field(repr=False)

    @property
    def per_axis_mse(self):
        return np.mean(self.euler_err**2, axis=0)

    @property
    def per_axis_rmse(self):
        return np.sqrt(self.per_axis_mse)

    @property
    def euler_mse(self):
        return float(np.mean(self.euler_err**2))

    @property
    def euler_rmse(self):
        return float(np.sqrt(self.euler_mse))

    @property
    def mean_geodesic(self):
        return float(np.mean(self.geodesic_err))

    def summary(self):
        mse, rmse = self.per_axis_mse, self.per_axis_rmse
        return {
            "method": self.method,
            "warmup": self.warmup,
            "n_steps": len(self.t),
            "mse_rx": mse[0],
            "mse_ry": mse[1],
            "mse_rz": mse[2],
            "rmse_rx": rmse[0],
            "rmse_ry": rmse[1],
            "rmse_rz": rmse[2],
            "euler_mse": self.euler_mse,
            "euler_rmse": self.euler_rmse,
            "mean_geodesic": self.mean_geodesic,
        }


def method_name(model):
    if isinstance(model, lstm.LstmRegressor):
        return "lstm"
    if isinstance(model, dvbf.DvbfModel):
        return "dvbf"
    return getattr(model, "name", type(model).__name__.lower())


def evaluate(model, ds):
    """Run ``model`` over the whole split and compare against ground truth."""
    check_stats(model, ds)
    poses, warmup = predict_stream(model, ds)
    truth = ds.y[warmup:]
    err = rot.wrap_angle(rot.rotation_to_euler(poses) - rot.rotation_to_euler(truth))
    return EvalReport(method_name(model), warmup, ds.t[warmup:], err, rot.geodesic_angle(poses, truth), poses)


# ------------------------------------------------------------------ spikes


@dataclass
class SpikeReport:
    locations: np.ndarray
    sensors: tuple
    magnitude: float
    duration: int
    lstm_peak: np.ndarray
    dvbf_peak: np.ndarray
    # clean-run outputs after each model's warm-up, as evaluate() produces them
    lstm_clean: np.ndarray = field(default=None, repr=False)
    dvbf_clean: np.ndarray = field(default=None, repr=False)

    @property
    def lstm_mean(self):
        return float(np.mean(self.lstm_peak))

    @property
    def dvbf_mean(self):
        return float(np.mean(self.dvbf_peak))

    @property
    def ratio(self):
        return self.dvbf_mean / self.lstm_mean if self.lstm_mean > 0 else float("nan")

    def summary(self):
        return {
            "n_locations": len(self.locations),
            "sensors": " ".join(str(s) for s in self.sensors),
            "magnitude": self.magnitude,
            "duration": self.duration,
            "lstm_mean_peak": self.lstm_mean,
            "dvbf_mean_peak": self.dvbf_mean,
            "dvbf_lstm_ratio": self.ratio,
        }


def spike_locations(n_steps, count, margin):
    return np.linspace(margin, n_steps - margin, count).astype(int)


def spike_experiment(lstm_model, dvbf_model, ds, magnitude=0.5, duration=3, sensors=(0,), count=20, horizon=60):
    """Peak output deviation caused by a constant-offset spike.

    At each of ``count`` evenly spaced locations an offset of ``magnitude``
    (standardized units) is added to every axis of the listed sensors for
    ``duration`` steps.  Deviation is the geodesic angle between the spiked
    and clean outputs of the same model; the peak is taken over the affected
    outputs (LSTM: until the spike leaves the window; DVBF: ``horizon``
    steps after onset).
    """
    check_stats(lstm_model, ds)
    check_stats(dvbf_model, ds)
    sensors = tuple(sensors)
    W = lstm_model.window
    locs = spike_locations(len(ds), count, max(W, 2) + horizon)

    lstm_clean, lstm_warm = predict_stream(lstm_model, ds)
    dvbf_all, states = dvbf.run_filter_states(dvbf_model, ds.x, ds.u)

    lstm_peak = np.empty(len(locs))
    dvbf_peak = np.empty(len(locs))
    for k, loc in enumerate(locs):
        x = ds.x.copy()
        x[loc : loc + duration, list(sensors), :] += magnitude

        spiked, _ = predict_stream(lstm_model, ds, x=x)
        sl = slice(loc - lstm_warm, loc + duration + W - 1 - lstm_warm)
        lstm_peak[k] = np.max(rot.geodesic_angle(spiked[sl], lstm_clean[sl]))

        state = states[loc - 1]
        worst = 0.0
        for t in range(loc, min(loc + horizon, len(ds))):
            state, pose, _ = dvbf.filter_step(dvbf_model, state, x[t : t + 1], ds.u[t : t + 1])
            worst = max(worst, float(rot.geodesic_angle(pose[0], dvbf_all[t])))
        dvbf_peak[k] = worst
    return SpikeReport(locs, sensors, float(magnitude), int(duration), lstm_peak, dvbf_peak, lstm_clean, dvbf_all[1:])


# ----------------------------------------------------------- serialization


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_summary(path, summary, fmt=SUMMARY_FORMAT):
    lines = [fmt] + [f"{k} = {_fmt(v)}" for k, v in summary.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_summary(path):
    lines = Path(path).read_text().splitlines()
    out = {}
    for ln in lines[1:]:
        if " = " in ln:
            k, _, v = ln.partition(" = ")
            out[k.strip()] = v.strip()
    return out


def write_report(out_dir, report):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [SERIES_FORMAT, "t,geodesic,err_rx,err_ry,err_rz"]
    for t, g, e in zip(report.t, report.geodesic_err, report.euler_err):
        rows.append(f"{int(t)},{g!r},{e[0]!r},{e[1]!r},{e[2]!r}")
    (out / f"{report.method}_series.csv").write_text("\n".join(rows) + "\n")
    write_summary(out / f"{report.method}_summary.txt", report.summary())


def write_spike_report(out_dir, report):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [SPIKE_FORMAT, "location,lstm_peak,dvbf_peak"]
    for loc, a, b in zip(report.locations, report.lstm_peak, report.dvbf_peak):
        rows.append(f"{int(loc)},{float(a)!r},{float(b)!r}")
    (out / "spike_peaks.csv").write_text("\n".join(rows) + "\n")
    write_summary(out / "spike_summary.txt", report.summary(), fmt=SPIKE_FORMAT)
