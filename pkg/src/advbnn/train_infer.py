"""Training loop for the four defense modes, ensemble prediction, and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nd_core as nd
from .attacks import AttackConfig, attack
from .bayes_net import LAYER_KINDS, Network, Prior, mlp
from .nd_core import GradTape, NoiseSource
from .objectives import total_loss

log = logging.getLogger(__name__)

DEFENSE_MODES = ("none", "bnn", "adv_train", "adv_bnn")
STOCHASTIC_MODES = ("bnn", "adv_bnn")
ADVERSARIAL_MODES = ("adv_train", "adv_bnn")

# epoch component of noise keys used outside training
EVAL_EPOCH = 1 << 30


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    k_train: int = 10
    gamma_train: float = 8 / 256
    step_train: float | None = None
    alpha: float = 1.0
    sigma0: float = 0.05
    seed: int = 0
    defense_mode: str = "adv_bnn"
    clip: tuple[float, float] | None = (0.0, 1.0)
    var_bias: bool = True

    def __post_init__(self):
        if self.defense_mode not in DEFENSE_MODES:
            raise ValueError(f"defense_mode must be one of {DEFENSE_MODES}, got {self.defense_mode!r}")
        if self.k_train < 0 or self.gamma_train < 0:
            raise ValueError("k_train and gamma_train must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @property
    def stochastic(self) -> bool:
        return self.defense_mode in STOCHASTIC_MODES

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every > 0:
            return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)
        return self.lr

    def attack_config(self) -> AttackConfig:
        return AttackConfig(gamma=self.gamma_train, k=self.k_train, step=self.step_train,
                            eot=True, clip=self.clip)

    def hash(self) -> str:
        return config_hash(asdict(self))


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def build_network(cfg: TrainConfig, d_in: int, n_classes: int, hidden=(64, 64), dtype=None) -> Network:
    return mlp(d_in, hidden, n_classes, variational=cfg.stochastic, sigma0=cfg.sigma0,
               alpha=cfg.alpha, seed=cfg.seed, dtype=dtype, bias=True if not cfg.stochastic else cfg.var_bias)


class SGD:
    """Heavy-ball SGD: v <- momentum * v + g (+ wd * p); p <- p - lr * v."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        for p, v, g in zip(self.params, self.velocity, grads):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p.data -= (self.lr * g).astype(p.data.dtype, copy=False)


@dataclass
class EpochMetrics:
    epoch: int
    clean_acc: float
    ce: float
    kl: float
    total: float


@dataclass
class StepCounters:
    """Per-run tallies used to check the one-of-each-per-minibatch structure."""
    minibatches: int = 0
    attacks: int = 0
    weight_samples: int = 0
    forwards: int = 0
    backwards: int = 0
    updates: int = 0


@dataclass
class TrainResult:
    net: Network
    history: list[EpochMetrics] = field(default_factory=list)
    counters: StepCounters = field(default_factory=StepCounters)


def _check_mode(net: Network, cfg: TrainConfig) -> None:
    if net.stochastic != cfg.stochastic:
        kind = "stochastic" if net.stochastic else "deterministic"
        raise ValueError(f"defense_mode={cfg.defense_mode} does not fit a {kind} network")


def train(net: Network, x, y, cfg: TrainConfig, metrics_csv: str | Path | None = None) -> TrainResult:
    """Train ``net`` in place.

    Per minibatch: craft adversarial inputs (adversarial modes only), draw
    one weight sample, one forward, one backward, one SGD update.
    """
    _check_mode(net, cfg)
    x = np.asarray(x, dtype=net.dtype)
    y = np.asarray(y)
    n = len(x)
    if n == 0:
        raise ValueError("empty training set")
    net.alpha = cfg.alpha
    params = net.parameters()
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    acfg = cfg.attack_config()
    result = TrainResult(net)
    c = result.counters
    writer = None
    fh = None
    if metrics_csv is not None:
        fh = open(metrics_csv, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "clean_acc", "ce", "kl", "total"])
    try:
        for epoch in range(cfg.epochs):
            opt.lr = cfg.lr_at(epoch)
            order = np.random.default_rng([cfg.seed, epoch, 104729]).permutation(n)
            sums = np.zeros(3)
            n_batches = 0
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                xb, yb = x[idx], y[idx]
                c.minibatches += 1
                if cfg.defense_mode in ADVERSARIAL_MODES:
                    xb = attack(net, xb, yb, acfg, NoiseSource(cfg.seed, epoch, b, slot=1))
                    c.attacks += 1
                eps = None
                if net.stochastic:
                    eps = net.sample_eps((cfg.seed, epoch, b, 0))
                    c.weight_samples += 1
                with GradTape() as tape:
                    lb = total_loss(net, xb, yb, eps, n_tr=n, alpha=cfg.alpha)
                c.forwards += 1
                if not math.isfinite(lb.total):
                    raise FloatingPointError(f"loss diverged at epoch {epoch}, batch {b}: {lb}")
                grads = tape.gradient(lb.tensor, params)
                c.backwards += 1
                opt.step(grads)
                c.updates += 1
                sums += (lb.ce, lb.kl, lb.total)
                n_batches += 1
            ce, kl, tot = sums / max(n_batches, 1)
            acc = float(np.mean(predict_mean(net, x) == y))
            m = EpochMetrics(epoch, acc, ce, kl, tot)
            result.history.append(m)
            log.info("epoch %d clean_acc=%.4f ce=%.4f kl=%.2f total=%.4f", epoch, acc, ce, kl, tot)
            if writer is not None:
                writer.writerow([epoch, f"{acc:.6f}", f"{ce:.8g}", f"{kl:.8g}", f"{tot:.8g}"])
    finally:
        if fh is not None:
            fh.close()
    return result


def predict_mean(net: Network, x, batch: int = 4096) -> np.ndarray:
    """Argmax at the posterior mean (the plain forward for deterministic nets)."""
    out = [net.forward(x[i:i + batch], mean=True).data.argmax(axis=1) for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def predict_ensemble(net: Network, x, m: int = 20, mode: str = "mean_prob",
                     noise: NoiseSource | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Labels and averaged class probabilities over ``m`` posterior samples.

    ``mean_prob`` takes the argmax of the averaged softmax; ``min_expected_loss``
    picks the label with the lowest average cross-entropy (the argmax of the
    averaged log-softmax).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if mode not in ("mean_prob", "min_expected_loss"):
        raise ValueError(f"unknown prediction mode {mode!r}")
    x = np.asarray(x, dtype=net.dtype)
    if not net.stochastic:
        logits = net.forward(x).data.astype(np.float64)
        probs = nd.softmax(logits)
        return probs.argmax(axis=1), probs
    noise = noise or NoiseSource(0, EVAL_EPOCH)
    probs = 0.0
    logp = 0.0
    for _ in range(m):
        lsm = nd.log_softmax(net.forward(x, net.sample_eps(noise)).data.astype(np.float64))
        probs = probs + np.exp(lsm)
        logp = logp + lsm
    probs = probs / m
    score = probs if mode == "mean_prob" else logp / m
    return score.argmax(axis=1), probs


# ---------------------------------------------------------------- checkpoints

MAGIC = b"ABNN"
FORMAT_VERSION = 1
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CorruptHeaderError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def _layer_descriptor(layer) -> dict:
    return {"kind": layer.kind, **layer.config()}


def save_checkpoint(net: Network, path, defense_mode: str | None = None, meta: dict | None = None) -> None:
    """Write ``net`` as: magic, u32 version, u32-length JSON config, arrays with shape headers."""
    dtype_name = "float64" if net.dtype == np.float64 else "float32"
    if defense_mode is None:
        defense_mode = "bnn" if net.stochastic else "none"
    header = {
        "defense_mode": defense_mode,
        "sigma0": net.prior.sigma0,
        "alpha": net.alpha,
        "dtype": dtype_name,
        "layers": [_layer_descriptor(l) for l in net.layers],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    params = net.parameters()
    dt = _DTYPES[dtype_name]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype=dt).tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(f"truncated payload: need {n} bytes at offset {self.pos}, "
                                        f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def _build_layer(desc: dict, sigma0: float, dtype):
    desc = dict(desc)
    kind = desc.pop("kind", None)
    cls = LAYER_KINDS.get(kind)
    if cls is None:
        raise CorruptHeaderError(f"unknown layer kind {kind!r}")
    try:
        if kind in ("relu", "flatten"):
            return cls()
        if kind in ("var_linear", "var_conv2d"):
            return cls(**desc, sigma0=sigma0, dtype=dtype)
        return cls(**desc, dtype=dtype)
    except TypeError as e:
        raise CorruptHeaderError(f"bad descriptor for {kind}: {e}") from e


def load_checkpoint(path) -> tuple[Network, dict]:
    """Read a checkpoint; returns the network and the header dict."""
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4)
    if magic != MAGIC:
        raise CorruptHeaderError(f"bad magic {magic!r} at offset 0")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    blob = r.take(r.u32())
    try:
        header = json.loads(blob.decode("utf-8"))
        dt = _DTYPES[header["dtype"]]
        layers_desc = header["layers"]
        sigma0 = float(header["sigma0"])
        alpha = float(header["alpha"])
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptHeaderError(f"unreadable config block: {e}") from e
    layers = [_build_layer(d, sigma0, dt.type) for d in layers_desc]
    try:
        net = Network(layers, Prior(sigma0), alpha)
    except ValueError as e:
        raise CorruptHeaderError(str(e)) from e
    params = net.parameters()
    n_arrays = r.u32()
    if n_arrays != len(params):
        raise ShapeMismatchError(f"file has {n_arrays} arrays, architecture needs {len(params)}")
    for i, p in enumerate(params):
        ndim = r.u32()
        shape = tuple(r.u32(ndim)) if ndim > 1 else ((r.u32(),) if ndim == 1 else ())
        if shape != p.shape:
            raise ShapeMismatchError(f"array {i}: stored shape {shape}, expected {p.shape}")
        raw = r.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
        p.data = np.frombuffer(raw, dtype=dt).astype(dt.type).reshape(shape)
    if r.pos != len(r.buf):
        raise CorruptHeaderError(f"{len(r.buf) - r.pos} trailing bytes after payload")
    return net, header
