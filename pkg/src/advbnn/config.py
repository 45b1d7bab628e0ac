"""Flat ``key = value`` run configuration.

One line per key, ``#`` starts a comment, unknown keys are errors.  The
resolved document is written next to every run's outputs so the run can be
repeated from it.
"""
from __future__ import annotations

import types
import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .attacks import AttackConfig
from .train_infer import TrainConfig, config_hash

DATASETS = ("moons", "blobs", "idx", "cifar")

# keys that describe the data rather than the model; eval commands inherit them from the checkpoint
DATA_KEYS = ("dataset", "n_train", "n_test", "n_classes", "dim", "separation", "noise", "data_seed",
             "train_images", "train_labels", "test_images", "test_labels", "cifar_train", "cifar_test",
             "dtype")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # training
    defense_mode: str = "adv_bnn"
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
    var_bias: bool = True
    clip: tuple[float, float] | None = (0.0, 1.0)
    # network
    arch: str = "auto"
    hidden: tuple[int, ...] = (64, 64)
    channels: int = 8
    dtype: str = "float32"
    # attack / evaluation
    attack_gamma: float | None = None
    attack_k: int = 20
    attack_step: float | None = None
    eot: bool = True
    random_start: bool = False
    n_samples: int = 1
    m: int = 20
    predict_mode: str = "mean_prob"
    eval_size: int = 1000
    gammas: str = "0:0.07:0.005"
    m_grid: str = "1,2,5,10,20,40"
    study_gammas: str = ""
    k_grid: str = "0,1,5,10,20,50,100"
    # data
    dataset: str = "moons"
    n_train: int = 2000
    n_test: int = 1000
    n_classes: int = 3
    dim: int = 3
    separation: float = 6.0
    noise: float = 0.1
    data_seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    cifar_train: str = ""
    cifar_test: str = ""
    # output
    out_dir: str = "runs/default"
    model_id: str = ""

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.arch not in ("auto", "mlp", "cnn"):
            raise ConfigError(f"arch must be auto, mlp or cnn, got {self.arch!r}")
        if self.predict_mode not in ("mean_prob", "min_expected_loss"):
            raise ConfigError(f"predict_mode must be mean_prob or min_expected_loss, got {self.predict_mode!r}")
        if self.m < 1 or self.eval_size < 1:
            raise ConfigError("m and eval_size must be >= 1")
        self.train_config()     # validates the training keys

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        try:
            return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def attack_config(self) -> AttackConfig:
        gamma = self.gamma_train if self.attack_gamma is None else self.attack_gamma
        try:
            return AttackConfig(gamma=gamma, k=self.attack_k, step=self.attack_step, eot=self.eot,
                                random_start=self.random_start, clip=self.clip, n_samples=self.n_samples)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def hash(self) -> str:
        # where outputs go does not change what the run computes
        d = asdict(self)
        d.pop("out_dir")
        return config_hash(d)

    def to_text(self) -> str:
        lines = [f"# resolved run config, hash {self.hash()}"]
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    def replace(self, **overrides) -> "RunConfig":
        d = asdict(self)
        d.update(overrides)
        return RunConfig(**d)


_HINTS = typing.get_type_hints(RunConfig)


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _optional_inner(hint):
    args = typing.get_args(hint)
    if (typing.get_origin(hint) in (typing.Union, types.UnionType)) and type(None) in args:
        return next(a for a in args if a is not type(None))
    return None


def parse_value(key: str, text: str):
    if key not in _HINTS:
        raise ConfigError(f"unknown config key {key!r}")
    hint = _HINTS[key]
    text = text.strip()
    inner = _optional_inner(hint)
    if inner is not None:
        if text.lower() in ("none", ""):
            return None
        hint = inner
    try:
        if hint is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if typing.get_origin(hint) is tuple:
            elem = typing.get_args(hint)[0]
            return tuple(elem(t) for t in text.split(",") if t.strip())
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {text!r}") from e
    raise ConfigError(f"cannot parse key {key!r}")


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse a key-value document into a dict of typed overrides."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        try:
            out[key] = parse_value(key, value)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return out


def load(path) -> dict:
    return parse_text(Path(path).read_text(), str(path))


def resolve(*layers: dict) -> RunConfig:
    """Later layers override earlier ones; all layers are applied to the defaults."""
    merged = {}
    for layer in layers:
        for k in layer:
            if k not in _HINTS:
                raise ConfigError(f"unknown config key {k!r}")
        merged.update(layer)
    return RunConfig(**merged)
