"""Run configuration: flat ``key = value`` text, overridable from the command line."""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from . import dvbf, lstm, simkit

CONFIG_FORMAT = "# magjoint-config v1"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int | None = None
    # dataset
    n_steps: int = 50000
    noise_sigma: float = 0.05
    outlier_prob: float = 0.0
    outlier_magnitude: float = 10.0
    outlier_duration: int = 3
    # rig
    n_sensors: int = 4
    sensor_radius: float = 0.025
    sensor_depth: float = 0.010
    magnet_radius: float = 0.008
    magnet_moment: float = 0.1
    # lstm
    window: int = 5
    lstm_hidden: int = 32
    lstm_epochs: int = 30
    lstm_batch: int = 64
    lstm_lr: float = 1e-3
    lstm_lr_final: float = 1e-4
    # dvbf
    latent_dim: int = 8
    dvbf_hidden: int = 32
    alpha: float = 1e-3
    seq_len: int = 32
    dvbf_epochs: int = 60
    dvbf_batch: int = 16
    dvbf_lr: float = 1e-3
    dvbf_lr_final: float = 1e-4
    clip_norm: float = 100.0
    # spike experiment; magnitude is a multiple of noise_sigma
    spike_magnitude: float = 10.0
    spike_duration: int = 3
    spike_sensors: str = "0"
    spike_count: int = 20
    spike_horizon: int = 60

    def set(self, key, raw):
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if "int" in kind:
                value = int(raw)
            elif "float" in kind:
                value = float(raw)
            else:
                value = str(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        setattr(self, key, value)

    def validate(self):
        if self.seed is None:
            raise ConfigError("a seed is required (config file or --seed)")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        for name in ("window", "lstm_hidden", "lstm_batch", "latent_dim", "dvbf_hidden", "seq_len", "dvbf_batch", "n_sensors"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lstm_epochs", "dvbf_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        try:
            self.noise_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def dump(self):
        lines = [CONFIG_FORMAT]
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def noise_spec(self):
        return simkit.NoiseSpec(self.noise_sigma, self.outlier_prob, self.outlier_magnitude, self.outlier_duration)

    def rig(self):
        return simkit.SensorRig.default(
            self.n_sensors, self.sensor_radius, self.sensor_depth, self.magnet_radius, self.magnet_moment
        )

    def lstm_config(self):
        return lstm.LstmConfig(
            hidden=self.lstm_hidden,
            window=self.window,
            epochs=self.lstm_epochs,
            batch_size=self.lstm_batch,
            lr=self.lstm_lr,
            lr_final=self.lstm_lr_final,
            seed=self.seed,
        )

    def dvbf_config(self):
        return dvbf.DvbfConfig(
            latent=self.latent_dim,
            hidden=self.dvbf_hidden,
            seq_len=self.seq_len,
            batch_size=self.dvbf_batch,
            epochs=self.dvbf_epochs,
            lr=self.dvbf_lr,
            lr_final=self.dvbf_lr_final,
            alpha=self.alpha,
            clip_norm=self.clip_norm,
            seed=self.seed,
        )

    def spike_sensor_list(self):
        try:
            return tuple(int(s) for s in self.spike_sensors.replace(",", " ").split())
        except ValueError as exc:
            raise ConfigError(f"bad spike_sensors {self.spike_sensors!r}") from exc


def parse_lines(lines):
    pairs = []
    for n, line in enumerate(lines, 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"line {n}: expected 'key = value', got {s!r}")
        key, _, value = s.partition("=")
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path=None, overrides=()):
    """Defaults, then the file at ``path``, then ``overrides`` (key, value) pairs."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        for key, value in parse_lines(p.read_text().splitlines()):
            cfg.set(key, value)
    for key, value in overrides:
        cfg.set(key, value)
    return cfg
