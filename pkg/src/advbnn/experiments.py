"""The desk-scale experimental setup shared by the acceptance suite and scripts/.

Two moons (2,000 train / 1,000 test), a 2x64 ReLU network, and the four
defense modes trained with identical schedules.  Inputs live in [0, 1]^2, so
the training radius is larger than the usual 8/256 image setting.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import nd_core as nd
from .attacks import AttackConfig
from .bayes_net import Network
from .data_io import Dataset, synth_two_moons
from .train_infer import (DEFENSE_MODES, TrainConfig, TrainResult, build_network, load_checkpoint,
                          save_checkpoint, train)


@dataclass(frozen=True)
class DeskSetup:
    n_train: int = 2000
    n_test: int = 1000
    noise: float = 0.1
    data_seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    train: TrainConfig = TrainConfig(epochs=150, batch_size=64, lr=0.05, lr_decay=0.3, lr_decay_every=60,
                                     momentum=0.9, k_train=10, gamma_train=0.08, sigma0=0.1, alpha=0.02,
                                     seed=0, defense_mode="adv_bnn")
    k_eval: int = 20
    m: int = 20

    @property
    def gamma(self) -> float:
        return self.train.gamma_train

    def attack(self, gamma: float | None = None, k: int | None = None) -> AttackConfig:
        return AttackConfig(gamma=self.gamma if gamma is None else gamma, k=self.k_eval if k is None else k,
                            clip=self.train.clip)

    def data(self, dtype=np.float64) -> tuple[Dataset, Dataset]:
        tr = synth_two_moons(self.n_train, self.noise, self.data_seed, "train")
        te = synth_two_moons(self.n_test, self.noise, self.data_seed, "test")
        return tr.astype(dtype), te.astype(dtype)

    def config(self, mode: str) -> TrainConfig:
        return replace(self.train, defense_mode=mode)

    def train_mode(self, mode: str, data: Dataset, dtype=np.float64) -> TrainResult:
        cfg = self.config(mode)
        with nd.precision(dtype):
            net = build_network(cfg, data.inputs.shape[1], data.n_classes, hidden=self.hidden)
            return train(net, data.inputs, data.labels, cfg)


DESK = DeskSetup()


def train_all(setup: DeskSetup = DESK, modes=DEFENSE_MODES, dtype=np.float64, log=print) -> dict[str, Network]:
    tr, _ = setup.data(dtype)
    nets = {}
    for mode in modes:
        t0 = time.perf_counter()
        res = setup.train_mode(mode, tr, dtype)
        nets[mode] = res.net
        if log:
            log(f"trained {mode:9s} in {time.perf_counter() - t0:5.1f}s, "
                f"train acc {res.history[-1].clean_acc:.3f}")
    return nets


def load_or_train(model_dir, setup: DeskSetup = DESK, modes=DEFENSE_MODES, dtype=np.float64,
                  log=print) -> dict[str, Network]:
    """Reuse ``<model_dir>/<mode>.abnn`` when present, otherwise train and save it."""
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    nets = {}
    for mode in modes:
        path = model_dir / f"{mode}.abnn"
        if path.exists():
            nets[mode], _ = load_checkpoint(path)
            continue
        nets[mode] = train_all(setup, (mode,), dtype, log)[mode]
        save_checkpoint(nets[mode], path, mode, {"seed": setup.config(mode).seed,
                                                   "config_hash": setup.config(mode).hash()})
    return nets
