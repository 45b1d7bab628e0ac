"""l-infinity sign-gradient attacks on deterministic and weight-stochastic networks."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import nd_core as nd
from .bayes_net import Network
from .nd_core import DimensionError, GradTape, NoiseSource, Tensor


@dataclass(frozen=True)
class AttackConfig:
    gamma: float
    k: int = 20
    step: float | None = None
    eot: bool = True
    random_start: bool = False
    clip: tuple[float, float] | None = (0.0, 1.0)
    n_samples: int = 1

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if self.step is not None and self.k > 0 and not self.step > 0:
            raise ValueError(f"step must be > 0, got {self.step}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    @property
    def step_size(self) -> float:
        # 2.5 * gamma / k lets the iterate cross the whole ball
        if self.step is not None:
            return self.step
        return 2.5 * self.gamma / self.k if self.k else 0.0

    def with_(self, **kw) -> "AttackConfig":
        return replace(self, **kw)


def project_linf(x, x0, gamma: float, clip: tuple[float, float] | None = None) -> np.ndarray:
    x = np.asarray(x)
    x0 = np.asarray(x0)
    if x.shape != x0.shape:
        raise DimensionError(f"project: {x.shape} vs {x0.shape}")
    out = np.clip(x, x0 - gamma, x0 + gamma)
    if clip is not None:
        out = np.clip(out, clip[0], clip[1])
    out = out.astype(x0.dtype, copy=True)
    # x0 +- gamma can round one ulp past the ball; step those coordinates back toward x0
    over = np.abs(out.astype(np.float64) - x0) > gamma
    while np.any(over):
        out[over] = np.nextafter(out[over], x0[over])
        over = np.abs(out.astype(np.float64) - x0) > gamma
    return out


def input_gradient(net: Network, x, y, eps=None, mean: bool = False) -> tuple[np.ndarray, float]:
    """(d loss / d x, loss) for one weight realization, parameters held fixed."""
    with net.frozen(), GradTape() as tape:
        xt = Tensor(x, requires_grad=True, dtype=net.dtype)
        loss = nd.softmax_cross_entropy(net.forward(xt, eps, mean=mean), y)
    (g,) = tape.gradient(loss, [xt])
    return g, loss.item()


def _iterate(x0, y, cfg: AttackConfig, grad_at, noise: NoiseSource | None) -> np.ndarray:
    x0 = np.asarray(x0)
    if cfg.gamma == 0 or cfg.k == 0:
        return x0.copy()
    x = x0.copy()
    if cfg.random_start:
        noise = noise or NoiseSource(0)
        x = project_linf(x0 + noise.uniform(x0.shape, -cfg.gamma, cfg.gamma, x0.dtype), x0,
                         cfg.gamma, cfg.clip)
    step = cfg.step_size
    for _ in range(cfg.k):
        g = grad_at(x)
        x = project_linf(x + step * np.sign(g), x0, cfg.gamma, cfg.clip)
    return x


def pgd_attack(net: Network, x0, y, cfg: AttackConfig, eps: Sequence[np.ndarray] | None = None,
               mean: bool = False, noise: NoiseSource | None = None) -> np.ndarray:
    """PGD with one fixed weight realization (``eps`` bundle, or the posterior mean).

    A stochastic network given no ``eps`` is attacked at its mean weights.
    """
    x0 = np.asarray(x0, dtype=net.dtype)
    if net.stochastic and eps is None:
        mean = True

    def grad_at(x):
        return input_gradient(net, x, y, eps, mean)[0]

    return _iterate(x0, y, cfg, grad_at, noise)


def eot_pgd_attack(net: Network, x0, y, cfg: AttackConfig, noise: NoiseSource) -> np.ndarray:
    """PGD on the expected loss: a fresh weight sample (or ``n_samples`` of them) every step."""
    x0 = np.asarray(x0, dtype=net.dtype)
    if not net.stochastic:
        return pgd_attack(net, x0, y, cfg, noise=noise)

    def grad_at(x):
        g = input_gradient(net, x, y, net.sample_eps(noise))[0]
        for _ in range(cfg.n_samples - 1):
            g = g + input_gradient(net, x, y, net.sample_eps(noise))[0]
        return g

    return _iterate(x0, y, cfg, grad_at, noise)


def attack(net: Network, x0, y, cfg: AttackConfig, noise: NoiseSource) -> np.ndarray:
    """EOT-PGD for stochastic nets when ``cfg.eot``, plain PGD otherwise."""
    if net.stochastic and cfg.eot:
        return eot_pgd_attack(net, x0, y, cfg, noise)
    return pgd_attack(net, x0, y, cfg, eps=net.sample_eps(noise) if net.stochastic else None,
                      noise=noise)


def fgsm(net: Network, x0, y, gamma: float, eps: Sequence[np.ndarray] | None = None,
         mean: bool = False, clip: tuple[float, float] | None = (0.0, 1.0)) -> np.ndarray:
    """Single full-radius sign step."""
    cfg = AttackConfig(gamma=gamma, k=1, step=gamma if gamma > 0 else None, eot=False, clip=clip)
    return pgd_attack(net, x0, y, cfg, eps=eps, mean=mean)
