"""Conditional flow matching on fixed-length acoustic feature vectors.

One engine serves two tasks. For dereverberation the condition is the
reverberant log-mel feature and the target the clean one. For RIR
estimation the condition is the same reverberant feature and the target a
log-EDC description of the impulse response.

The velocity field is a small tanh MLP with hand-written backpropagation.
Training samples ``x_t = (1 - (1 - s) t) x0 + t x1`` and regresses the
network onto ``u = x1 - (1 - s) x0`` (``s = sigma_min``; ``s = 0`` gives the
straight rectified path).
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import isotonic_regression

from .audio import SAMPLE_RATE, AudioBuffer, logmel
from .errors import (
    ConfigError,
    FormatError,
    IoError,
    RateError,
    SampleDivergedError,
    ShapeError,
    SilenceError,
    TrainingDivergedError,
)
from .metrics import ANALYSIS_WINDOW_S, DRR_HALF_WINDOW_S, EDC_CAP_DB, SILENCE_RMS, drr, edc, fixed_window
from .rir import Rir

CHECKPOINT_VERSION = 1
TIME_EMBED = 32
HIDDEN = 256
N_CHUNKS = 8
N_EDC_POINTS = 64
DIVERGENCE_LOSS = 1e6


def time_embedding(t, size=TIME_EMBED):
    """Sinusoidal embedding of ``t`` in [0, 1]; returns ``(len(t), size)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.geomspace(1.0, 100.0, size // 2)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# --------------------------------------------------------------------------- model

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "null")


@dataclass
class FlowModel:
    """Velocity field ``v(x_t, t, c)`` as a 2-hidden-layer MLP.

    ``null`` is the learned condition used for the unconditional branch of
    classifier-free guidance.
    """

    d_x: int
    d_c: int
    params: dict
    hidden: int = HIDDEN
    time_embed: int = TIME_EMBED
    activation: str = "tanh"
    loss_history: list = field(default_factory=list)

    @classmethod
    def init(cls, d_x, d_c, hidden=HIDDEN, time_embed=TIME_EMBED, rng=None):
        rng = np.random.default_rng(rng)
        d_in = d_x + d_c + time_embed
        p = {
            "W1": rng.standard_normal((d_in, hidden)) / np.sqrt(d_in),
            "b1": np.zeros(hidden),
            "W2": rng.standard_normal((hidden, hidden)) / np.sqrt(hidden),
            "b2": np.zeros(hidden),
            "W3": rng.standard_normal((hidden, d_x)) / np.sqrt(hidden),
            "b3": np.zeros(d_x),
            "null": np.zeros(d_c),
        }
        return cls(d_x, d_c, p, hidden, time_embed)

    @property
    def d_in(self):
        return self.d_x + self.d_c + self.time_embed

    def check_shapes(self):
        p, h = self.params, self.hidden
        expected = {
            "W1": (self.d_in, h), "b1": (h,), "W2": (h, h), "b2": (h,),
            "W3": (h, self.d_x), "b3": (self.d_x,), "null": (self.d_c,),
        }
        for name, shape in expected.items():
            if name not in p or p[name].shape != shape:
                got = None if name not in p else p[name].shape
                raise ShapeError(f"parameter {name}: expected {shape}, got {got}")

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    def copy(self):
        return FlowModel(self.d_x, self.d_c, {k: v.copy() for k, v in self.params.items()},
                         self.hidden, self.time_embed, self.activation, list(self.loss_history))

    def hash(self):
        """SHA-256 over the parameter bytes in a fixed order."""
        m = hashlib.sha256()
        for name in PARAM_NAMES:
            m.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return m.hexdigest()

    def _forward(self, xt, t, c):
        p = self.params
        inp = np.concatenate([xt, c, time_embedding(t, self.time_embed)], axis=1)
        a1 = np.tanh(inp @ p["W1"] + p["b1"])
        a2 = np.tanh(a1 @ p["W2"] + p["b2"])
        v = a2 @ p["W3"] + p["b3"]
        return v, (inp, a1, a2)

    def velocity(self, xt, t, c=None):
        """Velocity for a batch; ``c=None`` selects the null condition."""
        xt = np.atleast_2d(xt)
        n = xt.shape[0]
        if c is None:
            c = np.broadcast_to(self.params["null"], (n, self.d_c))
        c = np.atleast_2d(c)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        return self._forward(xt, t, c)[0]


def _as_batch(a, dim, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != dim:
        raise ShapeError(f"{name}: expected (..., {dim}), got {np.shape(a)}")
    return a


def flow_loss(model: FlowModel, x1, c, x0, t, sigma_min=0.0, drop=None):
    """Flow-matching loss and its gradients.

    Parameters
    ----------
    x1, c, x0 : array_like
        Target, condition and noise; shape ``(d,)`` or ``(batch, d)``.
    t : float or array_like
        Path time(s) in [0, 1].
    sigma_min : float
        Noise floor of the path.
    drop : array_like of bool, optional
        Rows whose condition is replaced by the learned null vector.

    Returns
    -------
    loss : float
        Mean over the batch of ``||v - u||^2 / d_x``.
    grads : dict
        Gradient of ``loss`` for every parameter.
    """
    x1 = _as_batch(x1, model.d_x, "x1")
    x0 = _as_batch(x0, model.d_x, "x0")
    c = _as_batch(c, model.d_c, "c")
    n = x1.shape[0]
    if x0.shape[0] != n or c.shape[0] != n:
        raise ShapeError(f"batch sizes differ: x1 {n}, x0 {x0.shape[0]}, c {c.shape[0]}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    if np.any(t < 0) or np.any(t > 1):
        raise ConfigError("t must lie in [0, 1]")
    if drop is not None:
        drop = np.broadcast_to(np.asarray(drop, dtype=bool), (n,))
        c = np.where(drop[:, None], model.params["null"][None, :], c)

    k = 1.0 - sigma_min
    xt = (1.0 - k * t[:, None]) * x0 + t[:, None] * x1
    u = x1 - k * x0
    p = model.params
    v, (inp, a1, a2) = model._forward(xt, t, c)
    err = v - u
    loss = float(np.sum(err**2) / (n * model.d_x))

    dv = 2.0 * err / (n * model.d_x)
    g = {"W3": a2.T @ dv, "b3": dv.sum(0)}
    dz2 = (dv @ p["W3"].T) * (1.0 - a2**2)
    g["W2"] = a1.T @ dz2
    g["b2"] = dz2.sum(0)
    dz1 = (dz2 @ p["W2"].T) * (1.0 - a1**2)
    g["W1"] = inp.T @ dz1
    g["b1"] = dz1.sum(0)
    g["null"] = np.zeros(model.d_c)
    if drop is not None and np.any(drop):
        dc = dz1 @ p["W1"][model.d_x : model.d_x + model.d_c].T
        g["null"] = dc[drop].sum(0)
    return loss, g


# --------------------------------------------------------------------------- training


@dataclass(frozen=True)
class FlowTrainConfig:
    steps: int = 10_000
    batch: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    sigma_min: float = 0.0
    cond_drop_prob: float = 0.1
    hidden: int = HIDDEN
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.cond_drop_prob < 1.0:
            raise ConfigError("cond_drop_prob must lie in [0, 1)")
        if not 0.0 <= self.sigma_min <= 0.1:
            raise ConfigError("sigma_min must lie in [0, 0.1]")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


def train_pairs(conditions, targets, config: FlowTrainConfig = FlowTrainConfig(), model=None, x0=None):
    """Fit a velocity field on already-normalized ``(condition, target)`` rows.

    ``x0`` pins the source sample to one fixed vector instead of drawing
    standard normal noise (a degenerate source, useful for closed-form checks).
    The mean loss per logging interval is appended to ``model.loss_history``.
    """
    C = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
    X = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if len(C) == 0 or len(C) != len(X):
        raise ShapeError(f"need matching nonempty condition/target sets, got {len(C)} and {len(X)}")
    if not (np.all(np.isfinite(C)) and np.all(np.isfinite(X))):
        raise ConfigError("training features must be finite")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = FlowModel.init(X.shape[1], C.shape[1], hidden=config.hidden, rng=rng)
    vel = {k: np.zeros_like(v) for k, v in model.params.items()}
    running = 0.0
    for step in range(config.steps):
        idx = rng.integers(0, len(X), config.batch)
        t = rng.uniform(0.0, 1.0, config.batch)
        noise = rng.standard_normal((config.batch, model.d_x))
        if x0 is not None:
            noise = np.broadcast_to(x0, noise.shape)
        drop = rng.uniform(size=config.batch) < config.cond_drop_prob
        loss, grads = flow_loss(model, X[idx], C[idx], noise, t, config.sigma_min, drop)
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise TrainingDivergedError(step, loss)
        for name, gr in grads.items():
            if config.weight_decay and name.startswith("W"):
                gr = gr + config.weight_decay * model.params[name]
            vel[name] *= config.momentum
            vel[name] += gr
            model.params[name] -= config.lr * vel[name]
        if not model.is_finite():
            raise TrainingDivergedError(step, loss)
        running += loss
        if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
            span = (step % config.log_every) + 1
            model.loss_history.append(running / span)
            running = 0.0
    return model


def train(task: FlowTask, dataset, config: FlowTrainConfig = FlowTrainConfig()) -> FlowModel:
    """Train on raw ``(condition, target)`` feature pairs.

    Normalization stats are fitted on ``dataset`` when the task has none, so
    pass the training split only.
    """
    if len(dataset) == 0:
        raise ConfigError("training set is empty")
    C = np.array([c for c, _ in dataset], dtype=np.float64)
    X = np.array([x for _, x in dataset], dtype=np.float64)
    if not task.fitted:
        task.fit(C, X)
    return train_pairs(task.norm_c(C), task.norm_x(X), config)


def sample(model: FlowModel, c, steps=32, seed=0, cfg_scale=1.0, x0=None):
    """Euler integration of the learned ODE from t=0 to t=1.

    ``c`` may be one condition vector or a batch. With ``cfg_scale == 1`` the
    unconditional branch is never evaluated, so the result is exactly the
    conditional flow.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    c = np.asarray(c, dtype=np.float64)
    single = c.ndim == 1
    c = _as_batch(c, model.d_c, "c")
    n = c.shape[0]
    if x0 is None:
        x = np.random.default_rng(seed).standard_normal((n, model.d_x))
    else:
        x = _as_batch(x0, model.d_x, "x0").copy()
    dt = 1.0 / steps
    for i in range(steps):
        t = i * dt
        v = model.velocity(x, t, c)
        if cfg_scale != 1.0:
            vu = model.velocity(x, t, None)
            v = vu + cfg_scale * (v - vu)
        with np.errstate(over="ignore", invalid="ignore"):
            x = x + dt * v
        if not np.all(np.isfinite(x)):
            raise SampleDivergedError(f"non-finite state at Euler step {i + 1}/{steps}")
    return x[0] if single else x


# --------------------------------------------------------------------------- features


def _crop_center(x, n):
    if len(x) >= n:
        s = (len(x) - n) // 2
        return x[s : s + n]
    return np.concatenate([x, np.zeros(n - len(x))])


def edc_grid(duration=ANALYSIS_WINDOW_S, n_points=N_EDC_POINTS):
    """Quadratically spaced EDC sample times: dense early, sparse late."""
    return duration * (np.arange(n_points) / (n_points - 1)) ** 2


def speech_feature(buffer: AudioBuffer, window=ANALYSIS_WINDOW_S):
    """64-band log-mel averaged over 8 equal time chunks, flattened (512,)."""
    if buffer.sample_rate != SAMPLE_RATE:
        raise RateError(f"features expect {SAMPLE_RATE} Hz, got {buffer.sample_rate} Hz")
    x = _crop_center(buffer.samples, int(round(window * buffer.sample_rate)))
    if np.sqrt(np.mean(x**2)) < SILENCE_RMS:
        raise SilenceError("cannot featurize a silent signal")
    mel = logmel(AudioBuffer(x, buffer.sample_rate)).frames
    chunks = np.array_split(np.arange(mel.shape[0]), N_CHUNKS)
    return np.concatenate([mel[idx].mean(axis=0) for idx in chunks])


def rir_feature(rir: Rir, window=ANALYSIS_WINDOW_S):
    """Log-EDC at 64 points, direct-path energy (dB) and DRR (dB): (66,)."""
    rir = fixed_window(rir, window)
    h = rir.h.samples
    fs = rir.sample_rate
    if not np.any(h):
        raise SilenceError("cannot featurize an all-zero RIR")
    curve = edc(rir).values_db
    pos = edc_grid(window) * fs
    vals = np.full(N_EDC_POINTS, EDC_CAP_DB)
    inside = pos <= len(curve) - 1
    vals[inside] = np.interp(pos[inside], np.arange(len(curve)), curve)
    nd = int(np.argmax(np.abs(h))) if rir.direct_delay is None else int(round(rir.direct_delay * fs))
    half = int(round(DRR_HALF_WINDOW_S * fs))
    e_direct = np.sum(h[max(nd - half, 0) : nd + half + 1] ** 2)
    return np.concatenate([vals, [10 * np.log10(max(e_direct, 1e-30)), drr(rir)]])


@dataclass
class FlowTask:
    """Feature map plus train-split normalization for one flow task."""

    kind: str
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    c_mean: np.ndarray | None = None
    c_std: np.ndarray | None = None
    train_ids: tuple = ()

    def __post_init__(self):
        if self.kind not in ("dereverb", "rir_estimation"):
            raise ConfigError(f"unknown flow task {self.kind!r}")

    @property
    def d_x(self):
        return N_CHUNKS * 64 if self.kind == "dereverb" else N_EDC_POINTS + 2

    @property
    def fitted(self):
        return self.x_mean is not None

    def fit(self, conditions, targets, ids=()):
        """Per-dimension mean/std from training rows only."""
        C, X = np.atleast_2d(conditions), np.atleast_2d(targets)
        self.c_mean, self.c_std = C.mean(0), _safe_std(C)
        self.x_mean, self.x_std = X.mean(0), _safe_std(X)
        self.train_ids = tuple(ids)
        return self

    def _need_stats(self):
        if not self.fitted:
            raise ConfigError("normalization stats not fitted")

    def norm_c(self, c):
        self._need_stats()
        return (np.asarray(c) - self.c_mean) / self.c_std

    def norm_x(self, x):
        self._need_stats()
        return (np.asarray(x) - self.x_mean) / self.x_std

    def denorm_x(self, z):
        self._need_stats()
        return np.asarray(z) * self.x_std + self.x_mean

    def to_dict(self):
        out = {"kind": self.kind, "train_ids": list(self.train_ids)}
        for k in ("x_mean", "x_std", "c_mean", "c_std"):
            v = getattr(self, k)
            out[k] = None if v is None else v.tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        arr = {k: None if d.get(k) is None else np.asarray(d[k], dtype=np.float64)
               for k in ("x_mean", "x_std", "c_mean", "c_std")}
        return cls(d["kind"], train_ids=tuple(d.get("train_ids", ())), **arr)


def _safe_std(a):
    s = a.std(0)
    return np.where(s > 1e-8, s, 1.0)


def featurize(task: FlowTask, wave, normalize=False):
    """Condition feature for audio, target feature for an RIR (dereverb
    targets are clean audio and use the speech feature too).

    With ``normalize=True`` the task's train-split stats are applied.
    """
    if isinstance(wave, Rir):
        if task.kind != "rir_estimation":
            raise ConfigError("RIR features belong to the rir_estimation task")
        f = rir_feature(wave)
        return task.norm_x(f) if normalize else f
    f = speech_feature(wave)
    if normalize:
        return task.norm_c(f)
    return f


def defeaturize_rir(feature, sample_rate=SAMPLE_RATE, duration=ANALYSIS_WINDOW_S, seed=0) -> Rir:
    """Noise-carrier RIR reproducing a feature's EDC, direct energy and DRR.

    A decreasing EDC is required; otherwise the curve is replaced by its
    nearest nonincreasing (least-squares) projection and
    ``meta["projected"]`` is set.
    """
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (N_EDC_POINTS + 2,):
        raise ShapeError(f"RIR feature must have shape ({N_EDC_POINTS + 2},), got {feature.shape}")
    if not np.all(np.isfinite(feature)):
        raise ConfigError("RIR feature must be finite")
    curve = np.minimum(feature[:N_EDC_POINTS], 0.0)
    projected = bool(np.any(np.diff(curve) > 0))
    if projected:
        curve = isotonic_regression(curve, increasing=False).x
    curve = np.maximum(curve, EDC_CAP_DB)
    e_direct_db, drr_db = feature[N_EDC_POINTS], feature[N_EDC_POINTS + 1]

    n = int(round(duration * sample_rate))
    half = int(round(DRR_HALF_WINDOW_S * sample_rate))
    n0 = half
    times = edc_grid(duration)
    # remaining-energy fraction on the sample grid, relative to the onset
    t = np.arange(n - n0 + 1) / sample_rate
    remain = 10 ** (np.interp(t, times, curve) / 10)
    remain[-1] = 0.0
    env = np.maximum(-np.diff(remain), 0.0)
    env[: half + 1] = 0.0
    rng = np.random.default_rng(seed)
    tail = np.sqrt(env) * rng.standard_normal(len(env))
    h = np.zeros(n)
    h[n0:] = tail
    e_direct = 10 ** (e_direct_db / 10)
    e_tail = np.sum(h**2)
    if e_tail > 0:
        h *= np.sqrt(e_direct * 10 ** (-drr_db / 10) / e_tail)
    h[n0] = np.sqrt(e_direct)
    meta = {"projected": projected, "seed": seed, "source": "defeaturize"}
    return Rir(AudioBuffer(h, sample_rate), direct_delay=n0 / sample_rate, meta=meta)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(model: FlowModel, task: FlowTask, path, extra=None):
    """Write a JSON checkpoint atomically."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "d_x": model.d_x,
        "d_c": model.d_c,
        "hidden": model.hidden,
        "time_embed": model.time_embed,
        "activation": model.activation,
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
        "params": {k: v.ravel().tolist() for k, v in model.params.items()},
        "task": task.to_dict(),
        "model_hash": model.hash(),
        "loss_history": list(model.loss_history),
        "extra": extra or {},
    }
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
        with os.fdopen(fd, "w") as f:
            json.dump(doc, f)
        os.replace(tmp, path)
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path):
    """Return ``(model, task, extra)``; refuses other format versions."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"checkpoint {path} is not valid JSON: {e}") from e
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint format {doc.get('format_version')!r} != supported {CHECKPOINT_VERSION}")
    params = {k: np.asarray(doc["params"][k], dtype=np.float64).reshape(doc["shapes"][k]) for k in PARAM_NAMES}
    model = FlowModel(doc["d_x"], doc["d_c"], params, doc["hidden"], doc["time_embed"], doc["activation"],
                      list(doc.get("loss_history", [])))
    model.check_shapes()
    if model.hash() != doc["model_hash"]:
        raise FormatError("checkpoint parameters do not match the stored hash")
    return model, FlowTask.from_dict(doc["task"]), doc.get("extra", {})
