"""Mean-field Gaussian layers and the sequential network that holds them.

Each variational weight tensor is described by a mean ``mu`` and a log
standard deviation ``s``; a realization is ``mu + exp(s) * eps`` with
``eps ~ N(0, I)``.  One ``eps`` is drawn per layer per forward pass, so the
whole minibatch shares one weight sample.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nd_core as nd
from .nd_core import DimensionError, NoiseSource, Tensor


@dataclass
class VariationalParams:
    mu: Tensor
    s: Tensor

    def __post_init__(self):
        if self.mu.shape != self.s.shape:
            raise DimensionError(f"mu {self.mu.shape} and s {self.s.shape} differ")

    @property
    def shape(self):
        return self.mu.shape

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.s.data)


@dataclass(frozen=True)
class Prior:
    sigma0: float = 0.05

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError(f"prior std must be positive, got {self.sigma0}")


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_variational(shape, sigma0: float, fan_in: int, rng: np.random.Generator | None = None,
                     dtype=None) -> VariationalParams:
    """Uniform fan-in means; log-std set to log(sigma0) so the posterior starts at the prior scale."""
    if not sigma0 > 0:
        raise ValueError(f"sigma0 must be positive, got {sigma0}")
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    dtype = dtype or nd.default_dtype()
    rng = rng if rng is not None else np.random.default_rng(0)
    mu = _uniform_fan_in(rng, shape, fan_in, dtype)
    s = np.full(shape, math.log(sigma0), dtype=dtype)
    return VariationalParams(Tensor(mu, requires_grad=True), Tensor(s, requires_grad=True))


def sample_weights(p: VariationalParams, eps) -> Tensor:
    """Reparameterized draw ``mu + exp(s) * eps``, recorded on the active tape."""
    eps = np.asarray(eps)
    if eps.shape != p.mu.shape:
        raise DimensionError(f"eps {eps.shape} does not match params {p.mu.shape}")
    eps_t = Tensor(eps, dtype=p.mu.dtype.type)
    return nd.add(p.mu, nd.mul(nd.exp(p.s), eps_t))


def rand_layer_backward(grad_out, p: VariationalParams, eps, sigma0: float, N: int):
    """Gradients of ``loss(w) + KL(q || prior) / N`` with respect to (mu, s).

    ``grad_out`` is dloss/dw at the sampled ``w``.  The KL terms are folded in
    exactly as in a fused RandLayer backward, i.e. with unit KL weight.
    """
    grad_out = np.asarray(grad_out)
    eps = np.asarray(eps)
    mu, s = p.mu.data, p.s.data
    if not (grad_out.shape == mu.shape == eps.shape):
        raise DimensionError("grad_out, params and eps must share a shape")
    if N < 1:
        raise ValueError("N must be >= 1")
    std = np.exp(s)
    var0 = sigma0 * sigma0
    grad_mu = grad_out + mu / (var0 * N)
    grad_s = grad_out * std * eps - 1.0 / N + std * std / (var0 * N)
    return grad_mu, grad_s


def variational_linear_forward(x: Tensor, weights: VariationalParams, eps,
                               bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weights.shape}")
    w = sample_weights(weights, eps)
    y = nd.matmul(x, nd.transpose(w))
    return y if bias is None else nd.add(y, bias)


def variational_conv2d_forward(x: Tensor, weights: VariationalParams, stride: int, padding: int,
                               eps, bias: Tensor | None = None) -> Tensor:
    w = sample_weights(weights, eps)
    y = nd.conv2d(x, w, stride=stride, padding=padding)
    if bias is not None:
        y = nd.add(y, nd.reshape(bias, (1, -1, 1, 1)))
    return y


# ---------------------------------------------------------------- layers


class Layer:
    kind = "layer"
    variational = False

    def parameters(self) -> list[Tensor]:
        return []

    def eps_shape(self):
        return None

    def forward(self, x: Tensor, eps=None) -> Tensor:
        raise NotImplementedError

    def config(self) -> dict:
        return {}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, eps=None):
        return nd.relu(x)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, eps=None):
        return nd.reshape(x, (x.shape[0], -1))


class VariationalLinear(Layer):
    kind = "var_linear"
    variational = True

    def __init__(self, d_in: int, d_out: int, sigma0: float = 0.05, bias: bool = False,
                 rng=None, dtype=None):
        self.d_in, self.d_out = d_in, d_out
        self.weight = init_variational((d_out, d_in), sigma0, d_in, rng, dtype)
        dtype = self.weight.mu.dtype.type
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def parameters(self):
        ps = [self.weight.mu, self.weight.s]
        return ps + [self.bias] if self.bias is not None else ps

    def eps_shape(self):
        return self.weight.shape

    def forward(self, x, eps=None):
        return variational_linear_forward(x, self.weight, eps, self.bias)

    def config(self):
        return {"d_in": self.d_in, "d_out": self.d_out, "bias": self.bias is not None}


class VariationalConv2d(Layer):
    kind = "var_conv2d"
    variational = True

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0,
                 sigma0: float = 0.05, bias: bool = False, rng=None, dtype=None):
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.padding = stride, padding
        self.weight = init_variational((c_out, c_in, kernel, kernel), sigma0,
                                       c_in * kernel * kernel, rng, dtype)
        dtype = self.weight.mu.dtype.type
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None

    def parameters(self):
        ps = [self.weight.mu, self.weight.s]
        return ps + [self.bias] if self.bias is not None else ps

    def eps_shape(self):
        return self.weight.shape

    def forward(self, x, eps=None):
        return variational_conv2d_forward(x, self.weight, self.stride, self.padding, eps, self.bias)

    def config(self):
        return {"c_in": self.c_in, "c_out": self.c_out, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding, "bias": self.bias is not None}


class Linear(Layer):
    """Deterministic fully connected layer, used by the undefended and adversarially trained baselines."""

    kind = "linear"

    def __init__(self, d_in: int, d_out: int, bias: bool = True, rng=None, dtype=None):
        dtype = dtype or nd.default_dtype()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in, self.d_out = d_in, d_out
        self.weight = Tensor(_uniform_fan_in(rng, (d_out, d_in), d_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, eps=None):
        if x.data.ndim != 2 or x.shape[1] != self.d_in:
            raise DimensionError(f"linear: input {x.shape} vs weight {self.weight.shape}")
        y = nd.matmul(x, nd.transpose(self.weight))
        return y if self.bias is None else nd.add(y, self.bias)

    def config(self):
        return {"d_in": self.d_in, "d_out": self.d_out, "bias": self.bias is not None}


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0,
                 bias: bool = True, rng=None, dtype=None):
        dtype = dtype or nd.default_dtype()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.padding = stride, padding
        shape = (c_out, c_in, kernel, kernel)
        self.weight = Tensor(_uniform_fan_in(rng, shape, c_in * kernel * kernel, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, eps=None):
        y = nd.conv2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            y = nd.add(y, nd.reshape(self.bias, (1, -1, 1, 1)))
        return y

    def config(self):
        return {"c_in": self.c_in, "c_out": self.c_out, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding, "bias": self.bias is not None}


LAYER_KINDS = {cls.kind: cls for cls in
               (ReLU, Flatten, VariationalLinear, VariationalConv2d, Linear, Conv2d)}


class Network:
    """Ordered stack of layers with a Gaussian prior and a KL weight ``alpha``."""

    def __init__(self, layers: Sequence[Layer], prior: Prior | None = None, alpha: float = 1.0):
        if not 0 < alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
        self.layers = list(layers)
        self.prior = prior or Prior()
        self.alpha = alpha

    @property
    def variational_layers(self) -> list[Layer]:
        return [l for l in self.layers if l.variational]

    @property
    def stochastic(self) -> bool:
        return bool(self.variational_layers)

    def variational_params(self) -> list[VariationalParams]:
        return [l.weight for l in self.variational_layers]

    def parameters(self) -> list[Tensor]:
        return [p for l in self.layers for p in l.parameters()]

    @property
    def n_params(self) -> int:
        """Weight count d (means only for variational layers)."""
        n = 0
        for l in self.layers:
            ps = l.parameters()
            if l.variational:
                ps = [p for p in ps if p is not l.weight.s]
            n += sum(p.data.size for p in ps)
        return n

    @property
    def dtype(self):
        ps = self.parameters()
        return ps[0].dtype.type if ps else nd.default_dtype()

    def eps_shapes(self) -> list[tuple[int, ...]]:
        return [l.eps_shape() for l in self.variational_layers]

    def sample_eps(self, key_or_noise) -> list[np.ndarray]:
        """One standard-normal bundle (one array per variational layer) from a single stream key."""
        shapes = self.eps_shapes()
        sizes = [int(np.prod(s)) for s in shapes]
        if isinstance(key_or_noise, NoiseSource):
            flat = key_or_noise.normal(sum(sizes), self.dtype)
        else:
            flat = nd.rng_normal(key_or_noise, sum(sizes), self.dtype)
        out, start = [], 0
        for shape, size in zip(shapes, sizes):
            out.append(flat[start:start + size].reshape(shape))
            start += size
        return out

    def zero_eps(self) -> list[np.ndarray]:
        return [np.zeros(s, dtype=self.dtype) for s in self.eps_shapes()]

    def forward(self, x, eps: Sequence[np.ndarray] | None = None, mean: bool = False) -> Tensor:
        """Logits for a batch.

        Stochastic networks need either an ``eps`` bundle or ``mean=True``
        (all eps zero, i.e. weights at the posterior mean).
        """
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        if self.stochastic:
            if mean:
                eps = self.zero_eps()
            elif eps is None:
                raise ValueError("stochastic network needs an eps bundle or mean=True")
            if len(eps) != len(self.variational_layers):
                raise DimensionError(
                    f"eps bundle has {len(eps)} entries, network has {len(self.variational_layers)} variational layers")
        it = iter(eps or [])
        for layer in self.layers:
            x = layer.forward(x, next(it) if layer.variational else None)
        return x

    __call__ = forward

    @contextlib.contextmanager
    def frozen(self):
        """Stop gradients flowing to parameters (attacks only need d/dx)."""
        ps = self.parameters()
        flags = [p.requires_grad for p in ps]
        for p in ps:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(ps, flags):
                p.requires_grad = f

    def set_log_std(self, value: float) -> None:
        for p in self.variational_params():
            p.s.data[...] = value

    def copy(self) -> "Network":
        import copy
        return copy.deepcopy(self)


def mlp(d_in: int, hidden: Sequence[int], n_classes: int, variational: bool, sigma0: float = 0.05,
        alpha: float = 1.0, seed: int = 0, dtype=None, bias: bool | None = None) -> Network:
    """ReLU multilayer perceptron; variational layers carry no bias unless asked."""
    rng = np.random.default_rng([seed, 7919])
    dims = [d_in, *hidden, n_classes]
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        if variational:
            layers.append(VariationalLinear(a, b, sigma0, bias=bool(bias), rng=rng, dtype=dtype))
        else:
            layers.append(Linear(a, b, bias=True if bias is None else bias, rng=rng, dtype=dtype))
        if i < len(dims) - 2:
            layers.append(ReLU())
    return Network(layers, Prior(sigma0), alpha)


def small_cnn(in_shape: tuple[int, int, int], n_classes: int, variational: bool, channels: int = 8,
              hidden: int = 32, sigma0: float = 0.05, alpha: float = 1.0, seed: int = 0,
              dtype=None) -> Network:
    """conv3x3(stride 2) -> relu -> flatten -> linear -> relu -> linear."""
    rng = np.random.default_rng([seed, 7919])
    c, h, w = in_shape
    ho, wo = (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1
    if variational:
        layers = [VariationalConv2d(c, channels, 3, 2, 1, sigma0, rng=rng, dtype=dtype), ReLU(), Flatten(),
                  VariationalLinear(channels * ho * wo, hidden, sigma0, rng=rng, dtype=dtype), ReLU(),
                  VariationalLinear(hidden, n_classes, sigma0, rng=rng, dtype=dtype)]
    else:
        layers = [Conv2d(c, channels, 3, 2, 1, rng=rng, dtype=dtype), ReLU(), Flatten(),
                  Linear(channels * ho * wo, hidden, rng=rng, dtype=dtype), ReLU(),
                  Linear(hidden, n_classes, rng=rng, dtype=dtype)]
    return Network(layers, Prior(sigma0), alpha)
