"""Dense tensors, a reverse-mode gradient tape, and counter-based noise.

The tape is deliberately small: every primitive records a closure that maps
the output gradient to input gradients, and :meth:`GradTape.gradient` replays
those closures in exact reverse order.  Storage is a contiguous numpy array;
there are no views or strides to reason about on the backward pass.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = [np.float32]
_TAPES: list["GradTape"] = []


class NonFiniteError(FloatingPointError):
    """A public operation produced NaN or Inf."""


class DimensionError(ValueError):
    """Operand shapes do not compose."""


def default_dtype():
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (float32 or float64)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE.append(dtype)
    try:
        yield dtype
    finally:
        _DEFAULT_DTYPE.pop()


class Tensor:
    """A dense row-major array plus a flag saying whether gradients flow to it."""

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype.type if arr.dtype.type in (np.float32, np.float64) else default_dtype()
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Ordered record of primitive operations for one reverse sweep.

    Usage::

        with GradTape() as tape:
            loss = f(x)
        gx, = tape.gradient(loss, [x])
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.records.append((out, inputs, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradient of scalar ``target`` with respect to each of ``sources``.

        Sources that the target does not depend on get a zero array.
        """
        if target.data.size != 1:
            raise DimensionError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, inputs, backward in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype.type if like is not None else None
    return Tensor(x, dtype=dtype)


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{opname} produced a non-finite value")


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable, opname: str) -> Tensor:
    _check_finite(data, opname)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs and _TAPES:
        _TAPES[-1].record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        out = np.add(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from e
    out = out.astype(a.dtype, copy=False)
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        out = np.multiply(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from e
    out = out.astype(a.dtype, copy=False)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(out, (a, b), backward, "mul")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def square(a: Tensor) -> Tensor:
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    return _emit(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def reshape(a: Tensor, shape) -> Tensor:
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return _emit(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,), "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    out = a.data @ b.data
    return _emit(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (B, C, Ho, Wo, kh, kw) read-only view
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (B, C, H, W) batch with an (O, C, kh, kw) kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} padding={padding}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kh or Wp < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, kh, kw, stride)
    Ho, Wo = win.shape[2], win.shape[3]
    out = np.einsum("bchwij,ocij->bohw", win, w.data, optimize=True)

    def backward(g):
        gw = np.einsum("bchwij,bohw->ocij", win, g, optimize=True)
        cols = np.einsum("bohw,ocij->bchwij", g, w.data, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[..., i, j]
        gx = gxp[:, :, padding:padding + H, padding:padding + W]
        return gx, gw

    return _emit(out, (x, w), backward, "conv2d")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise DimensionError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"label out of range [0, {n_classes})")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"logits must be B x C with C >= 2, got {logits.shape}")
    B, C = logits.shape
    labels = _check_labels(labels, B, C)
    lsm = log_softmax(logits.data)
    loss = -lsm[np.arange(B), labels].mean()

    def backward(g):
        d = np.exp(lsm)
        d[np.arange(B), labels] -= 1.0
        return (g * d / B,)

    return _emit(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")


def per_example_cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    return -log_softmax(logits)[np.arange(logits.shape[0]), labels]


# ---------------------------------------------------------------- oracles


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# ---------------------------------------------------------------- noise


def _generator(stream: Sequence[int]) -> np.random.Generator:
    key = [int(k) for k in stream]
    if any(k < 0 for k in key):
        raise ValueError(f"stream components must be non-negative, got {key}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def rng_normal(stream: Sequence[int], shape, dtype=None) -> np.ndarray:
    """Standard normal draws keyed by ``(seed, epoch, batch, slot)``.

    The same key always gives the same numbers regardless of what else was
    drawn before; different keys give independent streams.
    """
    dtype = dtype or default_dtype()
    return _generator(stream).standard_normal(shape).astype(dtype, copy=False)


def rng_uniform(stream: Sequence[int], shape, low=0.0, high=1.0, dtype=None) -> np.ndarray:
    dtype = dtype or default_dtype()
    return _generator(stream).uniform(low, high, shape).astype(dtype, copy=False)


class NoiseSource:
    """Hands out successive slots of one ``(seed, epoch, batch)`` stream."""

    def __init__(self, seed: int, epoch: int = 0, batch: int = 0, slot: int = 0):
        self.seed, self.epoch, self.batch, self.slot = seed, epoch, batch, slot

    def next_key(self) -> tuple[int, int, int, int]:
        key = (self.seed, self.epoch, self.batch, self.slot)
        self.slot += 1
        return key

    def normal(self, shape, dtype=None) -> np.ndarray:
        return rng_normal(self.next_key(), shape, dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=None) -> np.ndarray:
        return rng_uniform(self.next_key(), shape, low, high, dtype)
