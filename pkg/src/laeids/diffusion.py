"""Toy denoising-diffusion pretraining used as a feature extractor.

Standard DDPM pieces: linear beta schedule, closed-form forward noising and
an epsilon-prediction MSE objective. The denoiser is a two-hidden-layer tanh
MLP whose input is the noised image with ``t / T`` appended; its
penultimate activations are the representation vectors kept in memory.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from laeids.errors import (EmptyInput, InvalidRange, LengthMismatch, NonFiniteLoss, ShapeMismatch,
                           StepOutOfRange)

MEMORY_MAGIC = b"FMEM"
MEMORY_VERSION = 1
PROBE_ROWS = 512


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise StepOutOfRange(f"step {t} outside 1..{self.T}")
        return float(self.alpha_bars[t - 1])


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise InvalidRange("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidRange(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([float(beta_start)])
    sched = NoiseSchedule(betas)
    ab = sched.alpha_bars
    if not (np.all(np.diff(ab) < 0) and ab[-1] > 0):
        # betas this small vanish against 1.0 in float64
        raise InvalidRange("schedule is numerically degenerate")
    return sched


def q_sample(x0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Forward process ``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``.

    ``t`` may be a scalar step or one step per row of a 2-D batch.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise LengthMismatch(f"x0 {x0.shape} vs eps {eps.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise StepOutOfRange(f"step outside 1..{schedule.T}")
    ab = np.asarray(schedule.alpha_bars[t - 1], dtype=np.result_type(x0.dtype, np.float32))
    if ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


@dataclass
class DenoiserParams:
    """Weights of the MLP: ``layers[i] = (W, b)`` with ``W`` of shape (fan_in, fan_out)."""

    layers: list
    activation: str = "tanh"

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0] - 1

    @property
    def hidden_sizes(self) -> tuple:
        return tuple(W.shape[1] for W, _ in self.layers[:-1])

    @property
    def feature_dim(self) -> int:
        return self.layers[-2][0].shape[1]

    @property
    def dtype(self):
        return self.layers[0][0].dtype

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in self.layers)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for W, b in self.layers for a in (W, b)])

    def unflatten(self, flat) -> "DenoiserParams":
        flat = np.asarray(flat)
        layers, k = [], 0
        for W, b in self.layers:
            nW = flat[k:k + W.size].reshape(W.shape)
            k += W.size
            nb = flat[k:k + b.size].reshape(b.shape)
            k += b.size
            layers.append((nW.copy(), nb.copy()))
        return DenoiserParams(layers, self.activation)

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams([(W.astype(dtype), b.astype(dtype)) for W, b in self.layers], self.activation)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(W)) and np.all(np.isfinite(b)) for W, b in self.layers)


def init_denoiser(input_dim: int, hidden: Sequence[int] = (256, 64), seed: int = 0,
                  dtype=np.float64) -> DenoiserParams:
    """Glorot-uniform weights, zero biases. Input width is ``input_dim + 1`` (timestep)."""
    if len(hidden) < 1:
        raise ValueError("need at least one hidden layer")
    rng = np.random.default_rng(seed)
    sizes = [input_dim + 1, *hidden, input_dim]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-lim, lim, (fan_in, fan_out)).astype(dtype), np.zeros(fan_out, dtype=dtype)))
    return DenoiserParams(layers)


def _net_input(xt: np.ndarray, t, T: int) -> np.ndarray:
    tcol = np.broadcast_to(np.asarray(t, dtype=xt.dtype).reshape(-1, 1) / T, (xt.shape[0], 1))
    return np.concatenate([xt, tcol], axis=1)


def forward(params: DenoiserParams, u: np.ndarray):
    """Run the MLP on raw input rows; returns (prediction, list of hidden activations)."""
    hs = []
    h = u
    for W, b in params.layers[:-1]:
        h = np.tanh(h @ W + b)
        hs.append(h)
    W, b = params.layers[-1]
    return h @ W + b, hs


def denoise_loss(params: DenoiserParams, x0, t, eps, schedule: NoiseSchedule):
    """Noise-prediction MSE and its exact gradient.

    Accepts a single vector or a batch of rows (``t`` scalar or per row). The
    loss is the mean over every element of the batch.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=params.dtype))
    eps = np.atleast_2d(np.asarray(eps, dtype=params.dtype))
    if x0.shape != eps.shape:
        raise LengthMismatch(f"x0 {x0.shape} vs eps {eps.shape}")
    if x0.shape[1] != params.input_dim:
        raise ShapeMismatch(f"denoiser expects {params.input_dim} inputs, got {x0.shape[1]}")
    tt = np.broadcast_to(np.asarray(t), (x0.shape[0],))
    xt = q_sample(x0, tt, eps, schedule)
    u = _net_input(xt, tt, schedule.T)
    pred, hs = forward(params, u)
    diff = pred - eps
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise NonFiniteLoss("denoising loss is not finite")

    grads = [None] * len(params.layers)
    delta = 2.0 * diff / diff.size
    acts = [u] + hs
    for i in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ W.T) * (1.0 - acts[i] * acts[i])
    return loss, DenoiserParams(grads, params.activation)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hidden: tuple = (256, 64)
    dtype: str = "float64"  # "float32" is the fast mode
    t_extract: Optional[int] = None  # defaults to max(1, T // 4)

    def digest(self) -> str:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class FeatureMemory:
    denoiser: DenoiserParams
    schedule: NoiseSchedule
    image_shape: tuple
    t_extract: int
    representations: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    provenance: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.denoiser.feature_dim

    def features(self, X) -> np.ndarray:
        """Representation vectors for a batch of flattened images."""
        return extract_matrix(self.denoiser, self.schedule, X, self.t_extract)


def extract_matrix(denoiser: DenoiserParams, schedule: NoiseSchedule, X, t_extract: int) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=denoiser.dtype))
    if X.shape[1] != denoiser.input_dim:
        raise ShapeMismatch(f"denoiser expects {denoiser.input_dim} pixels, got {X.shape[1]}")
    ab = schedule.alpha_bar(t_extract)
    xt = np.sqrt(np.asarray(ab, dtype=X.dtype)) * X
    _, hs = forward(denoiser, _net_input(xt, t_extract, schedule.T))
    return hs[-1]


def extract_features(memory: FeatureMemory, image, t_extract: Optional[int] = None) -> np.ndarray:
    """Penultimate activations for one image, noised deterministically (zero noise)."""
    pixels = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    if pixels.ndim == 2 and tuple(pixels.shape) != tuple(memory.image_shape):
        raise ShapeMismatch(f"image {pixels.shape} vs trained {memory.image_shape}")
    t = memory.t_extract if t_extract is None else t_extract
    return extract_matrix(memory.denoiser, memory.schedule, pixels.reshape(1, -1), t)[0]


class _Adam:
    def __init__(self, params: DenoiserParams, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params.layers]
        self.v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params.layers]
        self.k = 0

    def step(self, params: DenoiserParams, grads: DenoiserParams) -> None:
        self.k += 1
        c1 = 1.0 - self.b1 ** self.k
        c2 = 1.0 - self.b2 ** self.k
        for i, ((W, b), (gW, gb)) in enumerate(zip(params.layers, grads.layers)):
            for j, (p, g) in enumerate(((W, gW), (b, gb))):
                m = self.m[i][j]
                v = self.v[i][j]
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _train(X: np.ndarray, cfg: PretrainConfig, schedule: NoiseSchedule, lr: float):
    dtype = np.dtype(cfg.dtype)
    params = init_denoiser(X.shape[1], cfg.hidden, cfg.seed, dtype)
    opt = _Adam(params, lr)
    rng = np.random.default_rng([cfg.seed, 1])
    losses, medians = [], []
    n = X.shape[0]
    # fixed (t, eps) probe so the per-epoch median is comparable across epochs
    probe = np.random.default_rng([cfg.seed, 2])
    P = X[:PROBE_ROWS]
    t_probe = probe.integers(1, cfg.T + 1, size=P.shape[0])
    eps_probe = probe.standard_normal(P.shape).astype(dtype)
    u_probe_args = (q_sample(P, t_probe, eps_probe, schedule), t_probe, cfg.T)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            t = rng.integers(1, cfg.T + 1, size=idx.size)
            eps = rng.standard_normal((idx.size, X.shape[1])).astype(dtype)
            loss, grads = denoise_loss(params, X[idx], t, eps, schedule)
            opt.step(params, grads)
            batch_losses.append(loss)
        if not params.is_finite():
            raise NonFiniteLoss("parameters diverged")
        losses.append(float(np.mean(batch_losses)))
        pred, _ = forward(params, _net_input(*u_probe_args))
        medians.append(float(np.median(np.mean((pred - eps_probe) ** 2, axis=1))))
    return params, losses, medians


def pretrain(images, cfg: PretrainConfig = PretrainConfig(), dataset: str = "") -> FeatureMemory:
    """Fit the denoiser on ``images`` and return the populated memory.

    ``images`` is a list of TrafficImage or an (n, H, W) array. A diverging
    run is retried once at half the learning rate.
    """
    if len(images) == 0:
        raise EmptyInput("no images to pretrain on")
    if isinstance(images, np.ndarray):
        stack = images
    else:
        stack = np.stack([im.pixels for im in images])
    if stack.ndim != 3:
        raise ShapeMismatch("images must share one H x W shape")
    shape = tuple(stack.shape[1:])
    X = stack.reshape(stack.shape[0], -1).astype(cfg.dtype)
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    lr = cfg.learning_rate
    try:
        params, losses, medians = _train(X, cfg, schedule, lr)
    except NonFiniteLoss:
        lr = lr / 2
        params, losses, medians = _train(X, cfg, schedule, lr)
    t_extract = cfg.t_extract or max(1, cfg.T // 4)
    reps = extract_matrix(params, schedule, X, t_extract)
    prov = {
        "dataset": dataset,
        "config_digest": cfg.digest(),
        "config": {**asdict(cfg), "hidden": list(cfg.hidden)},
        "learning_rate_used": lr,
        "epoch_losses": losses,
        "epoch_medians": medians,
        "n_images": int(X.shape[0]),
    }
    return FeatureMemory(params, schedule, shape, t_extract, reps, prov)


_HEAD = struct.Struct("<4sIIIIIII")  # magic, version, dtype code, T, t_extract, H, W, n_layers
_DTYPES = {0: np.float64, 1: np.float32}


def memory_to_bytes(mem: FeatureMemory) -> bytes:
    params = mem.denoiser
    code = 1 if params.dtype == np.float32 else 0
    parts = [_HEAD.pack(MEMORY_MAGIC, MEMORY_VERSION, code, mem.schedule.T, mem.t_extract,
                        mem.image_shape[0], mem.image_shape[1], len(params.layers))]
    for W, _ in params.layers:
        parts.append(struct.pack("<II", *W.shape))
    reps = np.asarray(mem.representations, dtype="<f8").reshape(-1, params.feature_dim)
    parts.append(struct.pack("<II", reps.shape[0], reps.shape[1]))
    parts.append(mem.schedule.betas.astype("<f8").tobytes())
    for W, b in params.layers:
        parts.append(W.astype("<f8").tobytes())
        parts.append(b.astype("<f8").tobytes())
    parts.append(reps.tobytes())
    trailer = json.dumps(mem.provenance, sort_keys=True).encode()
    parts.append(trailer)
    parts.append(struct.pack("<Q", len(trailer)))
    return b"".join(parts)


def memory_from_bytes(blob: bytes) -> FeatureMemory:
    magic, version, code, T, t_extract, H, W_, n_layers = _HEAD.unpack_from(blob)
    if magic != MEMORY_MAGIC:
        raise ValueError("not a feature-memory bundle")
    if version != MEMORY_VERSION:
        raise ValueError(f"unsupported memory version {version}")
    off = _HEAD.size
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack_from("<II", blob, off))
        off += 8
    n_rep, dim = struct.unpack_from("<II", blob, off)
    off += 8

    def take(count):
        nonlocal off
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        return arr

    betas = take(T)
    dtype = _DTYPES[code]
    layers = []
    for r, c in shapes:
        Wm = take(r * c).reshape(r, c).astype(dtype)
        b = take(c).astype(dtype)
        layers.append((Wm, b))
    reps = take(n_rep * dim).reshape(n_rep, dim)
    (tlen,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    prov = json.loads(blob[len(blob) - 8 - tlen:len(blob) - 8].decode())
    return FeatureMemory(DenoiserParams(layers), NoiseSchedule(betas), (H, W_), t_extract, reps, prov)


def save_memory(path, mem: FeatureMemory) -> None:
    with open(path, "wb") as fh:
        fh.write(memory_to_bytes(mem))


def load_memory(path) -> FeatureMemory:
    with open(path, "rb") as fh:
        return memory_from_bytes(fh.read())
