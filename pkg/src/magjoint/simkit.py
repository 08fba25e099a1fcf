"""Synthetic magnetic ball-and-socket joint.

Magnets sit inside the ball and rotate with the joint; 3-axis field sensors
are fixed on a disk below the ball.  A random walk over Euler-angle targets
drives the joint, one sample per 20 ms step.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rotation as rot
from .errors import FormatVersionError, TooCloseToSource

MU0_OVER_4PI = 1e-7
STEP_SECONDS = 0.02
MIN_DISTANCE = 1e-6

DATASET_FORMAT = "# magjoint-dataset v1"
META_FORMAT = "# magjoint-meta v1"


@dataclass(frozen=True)
class JointLimits:
    lo: tuple = (-1.418, -1.457, -2.036)
    hi: tuple = (0.647, -0.0288, 0.061)

    def __post_init__(self):
        if len(self.lo) != 3 or len(self.hi) != 3 or any(a >= b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"invalid joint limits {self.lo} / {self.hi}")

    @property
    def low(self):
        return np.array(self.lo, dtype=float)

    @property
    def high(self):
        return np.array(self.hi, dtype=float)


def _default_sensors(radius=0.025, depth=0.010, n=4):
    ang = 2.0 * np.pi * np.arange(n) / n
    return np.stack([radius * np.cos(ang), radius * np.sin(ang), np.full(n, -depth)], axis=1)


def _default_magnets(radius=0.008, moment=0.1):
    # 120 degree spacing; moment directions differ per magnet so that no
    # rotation of the ball maps the magnet set onto itself.
    ang = 2.0 * np.pi * np.arange(3) / 3
    pos = np.stack([radius * np.cos(ang), radius * np.sin(ang), np.full(3, -0.5 * radius)], axis=1)
    dirs = np.array(
        [
            [np.cos(ang[0]), np.sin(ang[0]), 0.0],
            [0.0, 0.0, 1.0],
            [-np.sin(ang[2]), np.cos(ang[2]), 0.5],
        ]
    )
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return pos, moment * dirs


@dataclass
class SensorRig:
    sensor_positions: np.ndarray = field(default_factory=_default_sensors)
    magnet_positions: np.ndarray = field(default_factory=lambda: _default_magnets()[0])
    magnet_moments: np.ndarray = field(default_factory=lambda: _default_magnets()[1])

    def __post_init__(self):
        self.sensor_positions = np.atleast_2d(np.asarray(self.sensor_positions, dtype=float))
        self.magnet_positions = np.atleast_2d(np.asarray(self.magnet_positions, dtype=float))
        self.magnet_moments = np.atleast_2d(np.asarray(self.magnet_moments, dtype=float))
        if self.n_sensors < 1:
            raise ValueError("rig needs at least one sensor")
        if self.magnet_positions.shape != self.magnet_moments.shape:
            raise ValueError("one moment per magnet position required")
        d = np.linalg.norm(self.sensor_positions[:, None] - self.sensor_positions[None], axis=-1)
        if np.any(d[~np.eye(self.n_sensors, dtype=bool)] <= 0.0):
            raise ValueError("sensor positions must be distinct")

    @property
    def n_sensors(self):
        return self.sensor_positions.shape[0]

    @classmethod
    def default(cls, n_sensors=4, sensor_radius=0.025, sensor_depth=0.010, magnet_radius=0.008, magnet_moment=0.1):
        pos, mom = _default_magnets(magnet_radius, magnet_moment)
        return cls(_default_sensors(sensor_radius, sensor_depth, n_sensors), pos, mom)

    def describe(self):
        return {
            "n_sensors": self.n_sensors,
            "sensor_positions": _vec_str(self.sensor_positions),
            "magnet_positions": _vec_str(self.magnet_positions),
            "magnet_moments": _vec_str(self.magnet_moments),
        }


@dataclass(frozen=True)
class NoiseSpec:
    gaussian_sigma: float = 0.0
    outlier_prob: float = 0.0
    outlier_magnitude: float = 10.0
    outlier_duration: int = 3

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be >= 0")
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise ValueError("outlier_prob must lie in [0, 1]")
        if self.outlier_duration < 1:
            raise ValueError("outlier_duration must be >= 1")


def dipole_field(moment, source_pos, query_pos):
    """Flux density (tesla) of a point dipole; broadcasts over leading axes."""
    m = np.asarray(moment, dtype=float)
    r = np.asarray(query_pos, dtype=float) - np.asarray(source_pos, dtype=float)
    d = np.linalg.norm(r, axis=-1, keepdims=True)
    if np.any(d <= MIN_DISTANCE):
        raise TooCloseToSource(f"query within {MIN_DISTANCE} m of a dipole")
    rhat = r / d
    mr = np.sum(m * rhat, axis=-1, keepdims=True)
    return MU0_OVER_4PI * (3.0 * mr * rhat - m) / d**3


def read_sensors(rig, pose):
    """Noise-free readings ``(..., n_sensors, 3)`` for poses ``(..., 3, 3)``."""
    pose = np.asarray(pose, dtype=float)
    # magnets in world frame: (..., n_mag, 3)
    mpos = np.einsum("...ij,kj->...ki", pose, rig.magnet_positions)
    mmom = np.einsum("...ij,kj->...ki", pose, rig.magnet_moments)
    field_ = dipole_field(
        mmom[..., None, :, :],
        mpos[..., None, :, :],
        rig.sensor_positions[:, None, :],
    )
    return field_.sum(axis=-2)


def random_walk(limits, n_steps, seed, rate=0.01, lag=0.2):
    """Random-walk joint targets and the lagging joint pose.

    Returns ``(u, y)`` with ``u`` of shape ``(n_steps, 3)`` (commanded Euler
    targets) and ``y`` of shape ``(n_steps, 3, 3)``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = limits.low, limits.high
    cmd = rng.uniform(lo, hi)
    goal = cmd.copy()
    pose = rot.euler_to_rotation(cmd)
    u = np.empty((n_steps, 3))
    y = np.empty((n_steps, 3, 3))
    u[0], y[0] = cmd, pose
    for t in range(1, n_steps):
        delta = goal - cmd
        span = np.max(np.abs(delta))
        if span <= rate:
            cmd = goal
            goal = rng.uniform(lo, hi)
        else:
            cmd = cmd + delta * (rate / span)
        pose = rot.slerp(pose, rot.euler_to_rotation(cmd), lag)
        e = rot.rotation_to_euler(pose)
        clipped = np.clip(e, lo, hi)
        if np.any(clipped != e):
            pose = rot.euler_to_rotation(clipped)
        u[t], y[t] = cmd, pose
    return u, y


class NoiseState:
    """RNG plus the spike currently in progress, carried across steps."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.spike_sensor = -1
        self.spike_left = 0
        self.spike_offset = None


def corrupt(frame, spec, state):
    """Gaussian noise plus at most one active spike on a single sensor."""
    frame = np.asarray(frame, dtype=float)
    out = frame.copy()
    if spec.gaussian_sigma > 0:
        out += state.rng.normal(0.0, spec.gaussian_sigma, size=frame.shape)
    if state.spike_left == 0 and spec.outlier_prob > 0 and state.rng.random() < spec.outlier_prob:
        state.spike_sensor = int(state.rng.integers(frame.shape[0]))
        state.spike_left = spec.outlier_duration
        signs = state.rng.choice([-1.0, 1.0], size=frame.shape[1])
        state.spike_offset = signs * spec.outlier_magnitude * spec.gaussian_sigma
    if state.spike_left > 0:
        out[state.spike_sensor] += state.spike_offset
        state.spike_left -= 1
    return out


@dataclass
class Stats:
    mean: np.ndarray
    std: np.ndarray

    def standardize(self, raw):
        return (raw - self.mean) / self.std

    def matches(self, other, tol=1e-12):
        return (
            self.mean.shape == other.mean.shape
            and np.allclose(self.mean, other.mean, rtol=tol, atol=0)
            and np.allclose(self.std, other.std, rtol=tol, atol=0)
        )

    def to_meta(self):
        return {"stats_mean": _vec_str(self.mean), "stats_std": _vec_str(self.std)}

    @classmethod
    def from_meta(cls, meta):
        return cls(_parse_vec(meta["stats_mean"]), _parse_vec(meta["stats_std"]))


@dataclass
class Dataset:
    """Aligned arrays; ``x`` is standardized, shape ``(T, n_sensors, 3)``."""

    t: np.ndarray
    u: np.ndarray
    y: np.ndarray
    x: np.ndarray
    stats: Stats
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    @property
    def n_sensors(self):
        return self.x.shape[1]

    def slice(self, start, stop):
        return Dataset(self.t[start:stop], self.u[start:stop], self.y[start:stop], self.x[start:stop], self.stats, dict(self.meta))


def generate_dataset(rig, limits, n_steps, noise, seed, train_fraction=0.7):
    """random_walk -> read_sensors -> standardize -> corrupt.

    Standardization statistics are computed over the clean readings of the
    leading ``train_fraction`` block.  Noise is applied in standardized units.
    """
    u, y = random_walk(limits, n_steps, seed)
    raw = read_sensors(rig, y)
    n_train = max(1, int(round(train_fraction * n_steps)))
    flat = raw[:n_train].reshape(n_train, -1)
    std = flat.std(axis=0)
    stats = Stats(flat.mean(axis=0), np.where(std > 0, std, 1.0))
    clean = stats.standardize(raw.reshape(n_steps, -1)).reshape(raw.shape)
    state = NoiseState(seed + 1)
    x = np.empty_like(clean)
    for i in range(n_steps):
        x[i] = corrupt(clean[i], noise, state)
    meta = {"seed": seed, **rig.describe(), **{f"noise_{k}": v for k, v in asdict(noise).items()}}
    meta["limits_lo"] = _vec_str(limits.low)
    meta["limits_hi"] = _vec_str(limits.high)
    meta["step_seconds"] = STEP_SECONDS
    return Dataset(np.arange(n_steps), u, y, x, stats, meta)


# -------------------------------------------------------------------- CSV I/O


def _vec_str(a):
    return " ".join(format(float(v), ".17g") for v in np.asarray(a).reshape(-1))


def _parse_vec(s):
    return np.array([float(v) for v in s.split()], dtype=float)


def csv_header(n_sensors, with_y=True):
    cols = ["t", "u_rx", "u_ry", "u_rz"]
    if with_y:
        cols += [f"y{i}{j}" for i in range(3) for j in range(3)]
    cols += [f"s{k}_{a}" for k in range(n_sensors) for a in "xyz"]
    return cols


def format_row(t, u, y, x):
    parts = [str(int(t))] + [repr(float(v)) for v in u]
    if y is not None:
        parts += [repr(float(v)) for v in np.asarray(y).reshape(-1)]
    parts += [repr(float(v)) for v in np.asarray(x).reshape(-1)]
    return ",".join(parts)


def write_csv(path, ds):
    lines = [DATASET_FORMAT, ",".join(csv_header(ds.n_sensors))]
    for i in range(len(ds)):
        lines.append(format_row(ds.t[i], ds.u[i], ds.y[i], ds.x[i]))
    Path(path).write_text("\n".join(lines) + "\n")


def parse_header(line):
    cols = line.strip().split(",")
    sensor_cols = [c for c in cols if c.startswith("s")]
    if cols[:4] != ["t", "u_rx", "u_ry", "u_rz"] or len(sensor_cols) % 3:
        raise ValueError(f"unrecognized dataset header: {line.strip()!r}")
    return cols, len(sensor_cols) // 3, "y00" in cols


def read_csv(path, stats):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != DATASET_FORMAT:
        raise FormatVersionError(f"{path}: expected {DATASET_FORMAT!r}")
    _, n_sensors, has_y = parse_header(lines[1])
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[2:] if ln.strip()], dtype=float)
    data = data.reshape(-1, len(csv_header(n_sensors, has_y)))
    t = data[:, 0].astype(int)
    u = data[:, 1:4]
    off = 4
    if has_y:
        y = data[:, 4:13].reshape(-1, 3, 3)
        off = 13
    else:
        y = np.full((len(t), 3, 3), np.nan)
    x = data[:, off:].reshape(-1, n_sensors, 3)
    return Dataset(t, u, y, x, stats)


def write_meta(path, meta):
    lines = [META_FORMAT] + [f"{k} = {v}" for k, v in meta.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_meta(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != META_FORMAT:
        raise FormatVersionError(f"{path}: expected {META_FORMAT!r}")
    meta = {}
    for ln in lines[1:]:
        if " = " in ln:
            k, _, v = ln.partition(" = ")
            meta[k.strip()] = v.strip()
    return meta


def split_sizes(n, fractions=(0.7, 0.15, 0.15)):
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return n_train, n_val, n - n_train - n_val


def save_splits(out_dir, ds):
    """Write contiguous train/val/test CSVs plus the metadata sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train, n_val, _ = split_sizes(len(ds))
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, len(ds))}
    for name, (a, b) in bounds.items():
        write_csv(out / f"{name}.csv", ds.slice(a, b))
    meta = dict(ds.meta)
    meta.update(ds.stats.to_meta())
    meta["n_steps"] = len(ds)
    meta.update({f"rows_{k}": b - a for k, (a, b) in bounds.items()})
    write_meta(out / "dataset.meta", meta)


def load_split(data_dir, name):
    d = Path(data_dir)
    meta = read_meta(d / "dataset.meta")
    ds = read_csv(d / f"{name}.csv", Stats.from_meta(meta))
    ds.meta = meta
    return ds


def dataset_euler(ds):
    return rot.rotation_to_euler(ds.y)

