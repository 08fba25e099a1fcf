"""Fusion deep variational Bayes filter.

Each sensor has its own recognition network producing a diagonal Gaussian
over the latent state.  The per-sensor Gaussians are fused by adding
precisions, then fused again with the transition prior to form the filtering
posterior.  Decoders reconstruct every sensor reading and the 6D pose from
the latent state.

Shapes: ``B`` batch, ``T`` time, ``n`` sensors, ``d`` latent size.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import rotation as rot
from .errors import DegenerateSixD, DimensionMismatch, EstimationFailed

SIGMA_FLOOR = 1e-4
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class DiagGaussian:
    mu: object
    sigma: object

    @property
    def dim(self):
        return np.shape(_val(self.mu))[-1]

    def numpy(self):
        return DiagGaussian(np.array(_val(self.mu)), np.array(_val(self.sigma)))


def _val(x):
    return x.value if isinstance(x, dc.Tensor) else x


def _positive(raw):
    return dc.softplus(raw) + SIGMA_FLOOR


# ----------------------------------------------------------------- Gaussians


def fuse_stacked(mu, sigma, axis=0):
    """Product of Gaussians stacked along ``axis``: precisions add."""
    prec = dc.reciprocal(dc.square(sigma))
    total = dc.tsum(prec, axis=axis)
    var = dc.reciprocal(total)
    return DiagGaussian(var * dc.tsum(prec * mu, axis=axis), dc.sqrt(var))


def fuse_gaussians(components):
    """Normalized product of diagonal Gaussians.

    ``sigma_out = (sum sigma_i**-2) ** -0.5`` and
    ``mu_out = sigma_out**2 * sum(sigma_i**-2 * mu_i)``.
    Plain numpy inputs give numpy outputs.
    """
    if not components:
        raise DimensionMismatch("need at least one component")
    dims = {np.shape(_val(c.mu)) for c in components} | {np.shape(_val(c.sigma)) for c in components}
    if len(dims) != 1:
        raise DimensionMismatch(f"component shapes differ: {sorted(dims)}")
    if len(components) == 1:
        return components[0]
    tensors = any(isinstance(c.mu, dc.Tensor) or isinstance(c.sigma, dc.Tensor) for c in components)
    out = fuse_stacked(dc.stack([c.mu for c in components]), dc.stack([c.sigma for c in components]))
    return out if tensors else out.numpy()


def kl_terms(q, p):
    """Elementwise KL(q || p) for diagonal Gaussians (not yet summed)."""
    ratio = dc.square(q.sigma / p.sigma)
    diff = dc.square((q.mu - p.mu) / p.sigma)
    return 0.5 * (ratio + diff - 1.0) - dc.log(q.sigma / p.sigma)


def kl_diag(q, p):
    """Closed-form KL(q || p) summed over the last axis."""
    if q.dim != p.dim:
        raise DimensionMismatch(f"KL between dims {q.dim} and {p.dim}")
    out = dc.tsum(kl_terms(q, p), axis=-1)
    tensors = any(isinstance(v, dc.Tensor) for v in (q.mu, q.sigma, p.mu, p.sigma))
    return out if tensors else out.value


def log_normal(x, g):
    """Diagonal Gaussian log-density summed over the last axis."""
    z = (x - g.mu) / g.sigma
    return dc.tsum(-0.5 * dc.square(z) - dc.log(g.sigma) - _HALF_LOG_2PI, axis=-1)


# --------------------------------------------------------------------- model


@dataclass
class DvbfConfig:
    latent: int = 8
    hidden: int = 32
    seq_len: int = 32
    batch_size: int = 16
    epochs: int = 60
    lr: float = 1e-3
    lr_final: float = 1e-4
    alpha: float = 1e-3
    clip_norm: float = 100.0
    val_sequences: int = 64
    seed: int = 0


class DvbfModel:
    """Parameters and the network pieces; all methods accept batched input."""

    def __init__(self, n_sensors=4, latent=8, hidden=32, alpha=1e-3, control_dim=3, seed=0, stats=None):
        if alpha < 0:
            raise ValueError("alpha must be >= 0")
        self.n_sensors = n_sensors
        self.latent = latent
        self.hidden = hidden
        self.alpha = alpha
        self.control_dim = control_dim
        self.stats = stats
        self.params = dc.ParamStore()
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        n, d, H, c = self.n_sensors, self.latent, self.hidden, self.control_dim
        p = self.params

        def stacked(fan_in, fan_out):
            return np.stack([dc.xavier_uniform(rng, fan_in, fan_out) for _ in range(n)])

        p.add("enc_W1", stacked(3, H))
        p.add("enc_b1", np.zeros((n, 1, H)))
        p.add("enc_W2", stacked(H, 2 * d))
        p.add("enc_b2", np.zeros((n, 1, 2 * d)))
        p.add("init_W1", dc.xavier_uniform(rng, 3 * n, H))
        p.add("init_b1", np.zeros(H))
        p.add("init_W2", dc.xavier_uniform(rng, H, 2 * d))
        p.add("init_b2", np.zeros(2 * d))
        p.add("trans_W1", dc.xavier_uniform(rng, d + c, H))
        p.add("trans_b1", np.zeros(H))
        p.add("trans_W2", dc.xavier_uniform(rng, H, H))
        p.add("trans_b2", np.zeros(H))
        p.add("trans_W3", dc.xavier_uniform(rng, H, 2 * d))
        p.add("trans_b3", np.zeros(2 * d))
        p.add("decx_W1", stacked(d, H))
        p.add("decx_b1", np.zeros((n, 1, H)))
        p.add("decx_W2", stacked(H, 6))
        p.add("decx_b2", np.zeros((n, 1, 6)))
        p.add("decy_W1", dc.xavier_uniform(rng, d, H))
        p.add("decy_b1", np.zeros(H))
        p.add("decy_W2", dc.xavier_uniform(rng, H, 12))
        p.add("decy_b2", np.zeros(12))

    def _split(self, out, k):
        return DiagGaussian(out[..., :k], _positive(out[..., k:]))

    def encode(self, x):
        """Per-sensor recognition Gaussians for frames ``(..., n, 3)``.

        Returns a DiagGaussian with fields shaped ``(n, ..., d)``.
        """
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-2]
        xs = np.moveaxis(x, -2, 0).reshape(self.n_sensors, -1, 3)
        p = self.params
        hid = dc.tanh(xs @ p["enc_W1"] + p["enc_b1"])
        out = hid @ p["enc_W2"] + p["enc_b2"]
        out = dc.reshape(out, (self.n_sensors,) + lead + (2 * self.latent,))
        return self._split(out, self.latent)

    def initial(self, x1):
        p = self.params
        flat = np.asarray(x1, dtype=float).reshape(np.shape(x1)[:-2] + (-1,))
        hid = dc.tanh(flat @ p["init_W1"] + p["init_b1"])
        return self._split(hid @ p["init_W2"] + p["init_b2"], self.latent)

    def transition(self, z, u):
        """Gaussian over the next latent; the mean is a residual update of ``z``."""
        p = self.params
        zu = dc.concat([z, np.asarray(u, dtype=float)], axis=-1)
        h1 = dc.tanh(zu @ p["trans_W1"] + p["trans_b1"])
        h2 = dc.tanh(h1 @ p["trans_W2"] + p["trans_b2"])
        out = h2 @ p["trans_W3"] + p["trans_b3"]
        return DiagGaussian(z + out[..., : self.latent], _positive(out[..., self.latent :]))

    def decode_x(self, z):
        """Per-sensor reading Gaussians, fields shaped ``(n, ..., 3)``."""
        p = self.params
        z = dc.as_tensor(z)
        lead = z.shape[:-1]
        zs = dc.reshape(z, (1, -1, self.latent))
        hid = dc.tanh(zs @ p["decx_W1"] + p["decx_b1"])
        out = dc.reshape(hid @ p["decx_W2"] + p["decx_b2"], (self.n_sensors,) + lead + (6,))
        return self._split(out, 3)

    def decode_y(self, z):
        p = self.params
        hid = dc.tanh(z @ p["decy_W1"] + p["decy_b1"])
        return self._split(hid @ p["decy_W2"] + p["decy_b2"], 6)

    def meta(self):
        meta = {
            "kind": "dvbf",
            "n_sensors": self.n_sensors,
            "latent": self.latent,
            "hidden": self.hidden,
            "alpha": repr(float(self.alpha)),
            "control_dim": self.control_dim,
        }
        if self.stats is not None:
            meta.update(self.stats.to_meta())
        return meta

    def save(self, path):
        dc.save_params(path, self.params, self.meta())

    @classmethod
    def from_saved(cls, values, meta, stats=None):
        model = cls(
            int(meta["n_sensors"]),
            int(meta["latent"]),
            int(meta["hidden"]),
            float(meta["alpha"]),
            int(meta.get("control_dim", 3)),
            stats=stats,
        )
        model.params.load_state_dict(values)
        return model


def posterior_step(model, prev_z, x_t, u_t):
    """Filtering posterior ``q_meas * q_trans`` for one step.

    Returns ``(posterior, prior, per_sensor)``; ``per_sensor`` fields carry
    the sensor index on axis 0.
    """
    per_sensor = model.encode(x_t)
    q_meas = fuse_stacked(per_sensor.mu, per_sensor.sigma)
    prior = model.transition(prev_z, u_t)
    posterior = fuse_stacked(dc.stack([q_meas.mu, prior.mu]), dc.stack([q_meas.sigma, prior.sigma]))
    return posterior, prior, per_sensor


# ---------------------------------------------------------------------- ELBO


@dataclass
class ElboTerms:
    elbo: dc.Tensor
    rec_x: dc.Tensor
    rec_y: dc.Tensor
    kl: dc.Tensor
    penalty: dc.Tensor

    def summary(self):
        return {k: float(getattr(self, k).value) for k in ("elbo", "rec_x", "rec_y", "kl", "penalty")}


def elbo(model, x, u, y6, noise=None, rng=None):
    """Batch-mean ELBO over sequences.

    ``x`` is ``(B, T, n, 3)``, ``u`` is ``(B, T, 3)``, ``y6`` is ``(B, T, 6)``.
    ``noise`` (``(B, T, d)``) freezes the reparameterization draws; otherwise
    they come from ``rng``.  Also returns the summed squared per-sensor
    encoder means (batch mean) used by the soft constraint.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    B, T = x.shape[:2]
    d = model.latent
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng()
        noise = rng.standard_normal((B, T, d))
    per_sensor = model.encode(x)  # (n, B, T, d)
    q_meas = fuse_stacked(per_sensor.mu, per_sensor.sigma)  # (B, T, d)

    q1 = model.initial(x[:, 0])
    z = q1.mu + q1.sigma * noise[:, 0]
    post_mu, post_sig = [q1.mu], [q1.sigma]
    prior_mu, prior_sig = [np.zeros((B, d))], [np.ones((B, d))]
    zs = [z]
    for t in range(1, T):
        prior = model.transition(z, u[:, t])
        post = fuse_stacked(
            dc.stack([q_meas.mu[:, t], prior.mu]),
            dc.stack([q_meas.sigma[:, t], prior.sigma]),
        )
        z = post.mu + post.sigma * noise[:, t]
        post_mu.append(post.mu)
        post_sig.append(post.sigma)
        prior_mu.append(prior.mu)
        prior_sig.append(prior.sigma)
        zs.append(z)

    Z = dc.stack(zs, axis=1)  # (B, T, d)
    q = DiagGaussian(dc.stack(post_mu, axis=1), dc.stack(post_sig, axis=1))
    p = DiagGaussian(dc.stack(prior_mu, axis=1), dc.stack(prior_sig, axis=1))
    kl = dc.tsum(kl_terms(q, p)) * (1.0 / B)

    px = model.decode_x(Z)  # (n, B, T, 3)
    rec_x = dc.tsum(log_normal(np.moveaxis(x, 2, 0), px)) * (1.0 / B)
    rec_y = dc.tsum(log_normal(np.asarray(y6, dtype=float), model.decode_y(Z))) * (1.0 / B)
    penalty = dc.tsum(dc.square(per_sensor.mu)) * (1.0 / B)
    return ElboTerms(rec_x + rec_y - kl, rec_x, rec_y, kl, penalty)


def constrained_loss(model, x, u, y6, noise=None, rng=None):
    """``-ELBO + alpha * sum_t sum_i |mu_i(x_t)|^2`` (batch mean); returns (loss, terms)."""
    terms = elbo(model, x, u, y6, noise=noise, rng=rng)
    return -terms.elbo + model.alpha * terms.penalty, terms


# ----------------------------------------------------------------- filtering


@dataclass
class FilterState:
    posterior: DiagGaussian
    step: int
    stats: object = None


def filter_init(model, x1):
    """Posterior of the first step from the initial network.  Batched input allowed."""
    with dc.no_grad():
        q1 = model.initial(np.asarray(x1, dtype=float))
    return FilterState(q1.numpy(), 1, model.stats)


def filter_pose(model, state):
    """Decoded pose and its 6D Gaussian for the current posterior mean."""
    with dc.no_grad():
        py = model.decode_y(state.posterior.mu).numpy()
    try:
        pose = rot.sixd_to_rotation(py.mu)
    except DegenerateSixD as exc:
        raise EstimationFailed(str(exc)) from exc
    return pose, py


def filter_step(model, state, x_t, u_t):
    """Advance one step using the posterior mean as the previous latent."""
    with dc.no_grad():
        post, _, _ = posterior_step(model, state.posterior.mu, np.asarray(x_t, dtype=float), u_t)
    new = FilterState(post.numpy(), state.step + 1, state.stats)
    pose, py = filter_pose(model, new)
    return new, pose, py


def run_filter(model, x, u, return_sigma=False):
    """Filter a whole stream (``x``: ``(T, n, 3)``); returns poses ``(T, 3, 3)``.

    The first pose comes from the initial network alone.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    state = filter_init(model, x[:1])
    pose, _ = filter_pose(model, state)
    poses = [pose[0]]
    sigmas = [state.posterior.sigma[0]]
    for t in range(1, len(x)):
        state, pose, _ = filter_step(model, state, x[t : t + 1], u[t : t + 1])
        poses.append(pose[0])
        sigmas.append(state.posterior.sigma[0])
    if return_sigma:
        return np.array(poses), np.array(sigmas)
    return np.array(poses)


def run_filter_states(model, x, u):
    """Like :func:`run_filter` but also returns every posterior (for restarts)."""
    x = np.asarray(x, dtype=float)
    state = filter_init(model, x[:1])
    pose, _ = filter_pose(model, state)
    poses, states = [pose[0]], [state]
    for t in range(1, len(x)):
        state, pose, _ = filter_step(model, state, x[t : t + 1], u[t : t + 1])
        poses.append(pose[0])
        states.append(state)
    return np.array(poses), states


# ------------------------------------------------------------------ training


def _subsequences(ds, starts, length):
    idx = np.asarray(starts)[:, None] + np.arange(length)[None, :]
    return ds.x[idx], ds.u[idx], rot.rotation_to_sixd(ds.y[idx])


def validation_metrics(model, val_ds, val_batch, val_noise):
    with dc.no_grad():
        terms = elbo(model, *val_batch, noise=val_noise)
    poses = run_filter(model, val_ds.x, val_ds.u)[1:]
    truth = val_ds.y[1:]
    err = rot.wrap_angle(rot.rotation_to_euler(poses) - rot.rotation_to_euler(truth))
    euler_mse = float(np.mean(err**2))
    return {
        "val_elbo": float(terms.elbo.value),
        "val_euler_mse": euler_mse,
        "val_euler_rmse": math.sqrt(euler_mse),
        "val_geodesic": float(np.mean(rot.geodesic_angle(poses, truth))),
    }


def train_dvbf(train_ds, val_ds, config=None, log_fn=None):
    """Minimize the constrained loss over random subsequences with Adam.

    Each epoch draws ``len(train) // seq_len`` subsequences.  Validation ELBO
    uses a fixed set of subsequences and frozen noise so epochs compare
    directly.  Returns ``(model, log)``.
    """
    cfg = config or DvbfConfig()
    L = cfg.seq_len
    if len(train_ds) < L:
        raise ValueError("training split shorter than the sequence length")
    model = DvbfModel(train_ds.n_sensors, cfg.latent, cfg.hidden, cfg.alpha, train_ds.u.shape[1], cfg.seed, train_ds.stats)
    rng = np.random.default_rng(cfg.seed + 1)
    val_rng = np.random.default_rng(cfg.seed + 2)
    n_val_seq = max(1, min(cfg.val_sequences, len(val_ds) // L))
    val_starts = np.linspace(0, len(val_ds) - L, n_val_seq).astype(int)
    val_batch = _subsequences(val_ds, val_starts, L)
    val_noise = val_rng.standard_normal((n_val_seq, L, cfg.latent))

    n_seq = max(1, len(train_ds) // L)
    n_batches = max(1, (n_seq + cfg.batch_size - 1) // cfg.batch_size)
    total = cfg.epochs * n_batches
    decay = (cfg.lr_final / cfg.lr) ** (1.0 / max(1, total - 1)) if cfg.lr_final else 1.0
    store = model.params
    log = []
    step = 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        starts = rng.integers(0, len(train_ds) - L + 1, size=n_seq)
        sums = {"loss": 0.0, "elbo": 0.0, "rec_x": 0.0, "rec_y": 0.0, "kl": 0.0, "penalty": 0.0}
        for b in range(n_batches):
            chunk = starts[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x, u, y6 = _subsequences(train_ds, chunk, L)
            loss, terms = constrained_loss(model, x, u, y6, rng=rng)
            dc.backward(loss)
            dc.adam_step(store, lr=cfg.lr * decay**step, clip_norm=cfg.clip_norm)
            step += 1
            sums["loss"] += loss.item() * len(chunk)
            for k, v in terms.summary().items():
                sums[k] += v * len(chunk)
        entry = {"epoch": epoch, "train_loss": sums.pop("loss") / n_seq}
        entry.update({f"train_{k}": v / n_seq for k, v in sums.items()})
        entry.update(validation_metrics(model, val_ds, val_batch, val_noise))
        entry["wall_seconds"] = time.perf_counter() - t0
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)
    return model, log
