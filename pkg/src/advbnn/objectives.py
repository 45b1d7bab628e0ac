"""KL regularizer, robust finite-sum loss, and a clean-data ELBO estimate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nd_core as nd
from .bayes_net import Network
from .nd_core import NoiseSource, Tensor


def kl_gaussian(mu_s, sigma_s, mu_t, sigma_t):
    """KL(N(mu_s, sigma_s^2) || N(mu_t, sigma_t^2)), elementwise."""
    sigma_s = np.asarray(sigma_s, dtype=np.float64)
    sigma_t = np.asarray(sigma_t, dtype=np.float64)
    if np.any(sigma_s <= 0) or np.any(sigma_t <= 0):
        raise ValueError("standard deviations must be positive")
    diff = np.asarray(mu_s, dtype=np.float64) - np.asarray(mu_t, dtype=np.float64)
    out = np.log(sigma_t / sigma_s) + (sigma_s ** 2 + diff ** 2) / (2.0 * sigma_t ** 2) - 0.5
    return float(out) if np.ndim(out) == 0 else out


def prior_kl(net: Network) -> Tensor:
    """Closed-form KL between the factorized posterior and N(0, sigma0^2 I), on the tape."""
    params = net.variational_params()
    if not params:
        raise ValueError("network has no variational layers")
    sigma0 = net.prior.sigma0
    inv = 1.0 / (2.0 * sigma0 * sigma0)
    terms = []
    for p in params:
        quad = nd.mul(nd.add(nd.exp(nd.mul(p.s, 2.0)), nd.square(p.mu)), inv)
        per = nd.add(nd.add(quad, nd.mul(p.s, -1.0)), math.log(sigma0) - 0.5)
        terms.append(nd.total(per))
    kl = terms[0]
    for t in terms[1:]:
        kl = nd.add(kl, t)
    return kl


@dataclass
class LossBreakdown:
    ce: float
    kl: float
    total: float
    alpha: float
    n_tr: int
    tensor: Tensor | None = field(default=None, repr=False, compare=False)


def total_loss(net: Network, x_adv, y, eps_bundle: Sequence[np.ndarray] | None, n_tr: int,
               alpha: float | None = None, use_kl: bool | None = None) -> LossBreakdown:
    """Minibatch mean cross-entropy plus ``alpha * KL / n_tr``.

    The full KL enters every minibatch divided by the training-set size, so
    the minibatch gradient is an unbiased estimate of the full-data gradient.
    Deterministic networks (or ``use_kl=False``) get the cross-entropy alone.
    """
    if n_tr < 1:
        raise ValueError("n_tr must be >= 1")
    alpha = net.alpha if alpha is None else alpha
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    use_kl = net.stochastic if use_kl is None else use_kl
    logits = net.forward(x_adv, eps_bundle)
    ce = nd.softmax_cross_entropy(logits, y)
    if use_kl:
        kl = prior_kl(net)
        total = nd.add(ce, nd.mul(kl, alpha / n_tr))
        kl_val = kl.item()
    else:
        total, kl_val = ce, 0.0
    return LossBreakdown(ce.item(), kl_val, total.item(), alpha, n_tr, total)


def elbo_clean(net: Network, x, y, m: int = 1, noise: NoiseSource | None = None,
               eps_samples: Sequence[Sequence[np.ndarray]] | None = None) -> float:
    """Monte-Carlo ELBO on unperturbed data: -KL + sum_i mean_k log p(y_i | x_i, w_k)."""
    if eps_samples is None:
        if m < 1:
            raise ValueError("m must be >= 1")
        noise = noise or NoiseSource(0)
        eps_samples = [net.sample_eps(noise) for _ in range(m)]
    loglik = 0.0
    for eps in eps_samples:
        logits = net.forward(x, eps).data.astype(np.float64)
        loglik += -nd.per_example_cross_entropy(logits, y).sum()
    loglik /= len(eps_samples)
    return float(loglik - prior_kl(net).item())
