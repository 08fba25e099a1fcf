"""Windowed LSTM regressor: the last W sensor frames in, one rotation out."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from . import rotation as rot
from .errors import DegenerateSixD, EstimationFailed, ShapeMismatch

GATES = ("f", "i", "o", "c")


@dataclass
class LstmConfig:
    hidden: int = 32
    window: int = 5
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    lr_final: float = 1e-4
    seed: int = 0


@dataclass
class CellState:
    C: object
    h: object


def init_params(store, input_dim, hidden, rng):
    for g in GATES:
        store.add(f"W{g}", dc.xavier_uniform(rng, input_dim + hidden, hidden))
        store.add(f"b{g}", np.ones(hidden) if g == "f" else np.zeros(hidden))
    store.add("W_out", dc.xavier_uniform(rng, hidden, 6))
    store.add("b_out", np.zeros(6))


def _value(a):
    return a.value if isinstance(a, dc.Tensor) else a


def lstm_cell(store, prev, x_t):
    """One step on batched inputs: ``x_t`` is ``(B, input_dim)``, the state ``(B, hidden)``."""
    rows = store["Wf"].shape[0]
    if np.shape(_value(x_t))[-1] + np.shape(_value(prev.h))[-1] != rows:
        raise ShapeMismatch(f"input {np.shape(_value(x_t))} and state {np.shape(_value(prev.h))} do not fit gate rows {rows}")
    xh = dc.concat([x_t, prev.h], axis=-1)
    f = dc.sigmoid(xh @ store["Wf"] + store["bf"])
    i = dc.sigmoid(xh @ store["Wi"] + store["bi"])
    o = dc.sigmoid(xh @ store["Wo"] + store["bo"])
    c_hat = dc.tanh(xh @ store["Wc"] + store["bc"])
    C = prev.C * f + c_hat * i
    h = o * dc.tanh(C)
    return CellState(C, h)


class LstmRegressor:
    def __init__(self, n_sensors=4, hidden=32, window=5, seed=0, stats=None):
        self.n_sensors = n_sensors
        self.input_dim = 3 * n_sensors
        self.hidden = hidden
        self.window = window
        self.stats = stats
        self.params = dc.ParamStore()
        init_params(self.params, self.input_dim, hidden, np.random.default_rng(seed))

    def zero_state(self, batch):
        z = np.zeros((batch, self.hidden))
        return CellState(dc.Tensor(z), dc.Tensor(z))

    def forward(self, windows):
        """Raw 6D head output for windows shaped ``(B, W, n_sensors*3)``."""
        windows = np.asarray(windows, dtype=float)
        state = self.zero_state(windows.shape[0])
        for k in range(windows.shape[1]):
            state = lstm_cell(self.params, state, windows[:, k, :])
        return state.h @ self.params["W_out"] + self.params["b_out"]

    def predict_sixd(self, windows):
        with dc.no_grad():
            return self.forward(windows).value

    def predict_batch(self, windows):
        try:
            return rot.sixd_to_rotation(self.predict_sixd(windows))
        except DegenerateSixD as exc:
            raise EstimationFailed(str(exc)) from exc

    def predict(self, window):
        """Rotation for a single window of ``W`` standardized frames."""
        window = np.asarray(window, dtype=float).reshape(1, self.window, self.input_dim)
        return self.predict_batch(window)[0]

    def meta(self):
        meta = {
            "kind": "lstm",
            "n_sensors": self.n_sensors,
            "hidden": self.hidden,
            "window": self.window,
        }
        if self.stats is not None:
            meta.update(self.stats.to_meta())
        return meta

    def save(self, path):
        dc.save_params(path, self.params, self.meta())

    @classmethod
    def from_saved(cls, values, meta, stats=None):
        model = cls(int(meta["n_sensors"]), int(meta["hidden"]), int(meta["window"]), stats=stats)
        model.params.load_state_dict(values)
        return model


def sliding_windows(x, window):
    """``(T, n, 3)`` frames -> ``(T - W + 1, W, 3n)`` windows ending at each step."""
    flat = np.asarray(x, dtype=float).reshape(len(x), -1)
    view = np.lib.stride_tricks.sliding_window_view(flat, window, axis=0)
    return np.ascontiguousarray(np.swapaxes(view, 1, 2))


def window_targets(ds, window):
    return rot.rotation_to_sixd(ds.y[window - 1 :])


def sixd_mse(pred, target):
    return float(np.mean((pred - target) ** 2))


def _validate(model, val_ds):
    windows = sliding_windows(val_ds.x, model.window)
    sixd = model.predict_sixd(windows)
    target = window_targets(val_ds, model.window)
    pred = rot.sixd_to_rotation(sixd)
    truth = val_ds.y[model.window - 1 :]
    err = rot.wrap_angle(rot.rotation_to_euler(pred) - rot.rotation_to_euler(truth))
    euler_mse = float(np.mean(err**2))
    return {
        "val_sixd_mse": sixd_mse(sixd, target),
        "val_euler_mse": euler_mse,
        "val_euler_rmse": float(np.sqrt(euler_mse)),
        "val_geodesic": float(np.mean(rot.geodesic_angle(pred, truth))),
    }


def train_lstm(train_ds, val_ds, config=None, log_fn=None):
    """Minimize 6D-space MSE over sliding windows with Adam.

    The learning rate decays geometrically from ``lr`` to ``lr_final`` over
    the run.  Returns ``(model, log)`` where ``log`` holds one dict per epoch.
    """
    cfg = config or LstmConfig()
    if len(train_ds) < cfg.window + 1:
        raise ValueError("training split shorter than window + 1")
    model = LstmRegressor(train_ds.n_sensors, cfg.hidden, cfg.window, seed=cfg.seed, stats=train_ds.stats)
    windows = sliding_windows(train_ds.x, cfg.window)
    targets = window_targets(train_ds, cfg.window)
    rng = np.random.default_rng(cfg.seed + 1)
    n = len(windows)
    n_batches = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    total = cfg.epochs * n_batches
    decay = (cfg.lr_final / cfg.lr) ** (1.0 / max(1, total - 1)) if cfg.lr_final else 1.0
    log = []
    store = model.params
    step = 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            out = model.forward(windows[idx])
            loss = dc.mean(dc.square(out - targets[idx]))
            dc.backward(loss)
            dc.adam_step(store, lr=cfg.lr * decay**step)
            step += 1
            running += loss.item() * len(idx)
        entry = {"epoch": epoch, "train_loss": running / n, **_validate(model, val_ds)}
        entry["wall_seconds"] = time.perf_counter() - t0
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)
    return model, log


def config_dict(cfg):
    return asdict(cfg)
