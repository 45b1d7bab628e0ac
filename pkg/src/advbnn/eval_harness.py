"""Evaluation protocols: robust-accuracy sweeps, transfer affinity, ensemble/PGD-step studies,
and a local Lipschitz diagnostic.  All results can be written as CSV."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .attacks import AttackConfig, attack, input_gradient
from .bayes_net import Network
from .nd_core import NoiseSource
from .train_infer import EVAL_EPOCH, config_hash, predict_ensemble

ATTACK_EPOCH = EVAL_EPOCH
PREDICT_EPOCH = EVAL_EPOCH + 1


class UndefinedAffinityError(ArithmeticError):
    def __init__(self, acc_b, acc_b_given_a, acc_b_given_b):
        super().__init__(f"affinity undefined: Acc[B]={acc_b}, Acc[B|A]={acc_b_given_a}, "
                         f"Acc[B|B]={acc_b_given_b} (self-attack did not reduce accuracy)")
        self.acc_b, self.acc_b_given_a, self.acc_b_given_b = acc_b, acc_b_given_a, acc_b_given_b


def binomial_sigma(p: float, n: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / n) if n else float("nan")


def _chunks(n: int, size: int):
    for i, start in enumerate(range(0, n, size)):
        yield i, slice(start, min(start + size, n))


def craft_adversarial(net: Network, x, y, cfg: AttackConfig, seed: int = 0, chunk: int = 500,
                      stream: int = 0) -> np.ndarray:
    """Attack a whole split chunk by chunk; EOT for stochastic nets when ``cfg.eot``.

    Noise keys depend on (seed, stream, chunk index) only, so repeating a call
    reproduces it exactly.
    """
    x = np.asarray(x, dtype=net.dtype)
    out = np.empty_like(x)
    for i, sl in _chunks(len(x), chunk):
        noise = NoiseSource(seed, ATTACK_EPOCH + 2 * stream, i)
        out[sl] = attack(net, x[sl], y[sl], cfg, noise)
    return out


def ensemble_accuracy(net: Network, x, y, m: int = 20, seed: int = 0, chunk: int = 2000,
                      stream: int = 0, mode: str = "mean_prob") -> float:
    y = np.asarray(y)
    correct = 0
    for i, sl in _chunks(len(y), chunk):
        noise = NoiseSource(seed, PREDICT_EPOCH + 2 * stream, i)
        pred, _ = predict_ensemble(net, x[sl], m, mode, noise)
        correct += int(np.sum(pred == y[sl]))
    return correct / len(y) if len(y) else float("nan")


def accuracy_under_attack(net: Network, x, y, cfg: AttackConfig, m: int = 20, seed: int = 0,
                          chunk: int = 500, mode: str = "mean_prob") -> float:
    """Fraction of points still classified correctly by the m-sample ensemble after the attack."""
    if m < 1:
        raise ValueError("m must be >= 1")
    x_adv = craft_adversarial(net, x, y, cfg, seed, chunk)
    return ensemble_accuracy(net, x_adv, y, m, seed, mode=mode)


@dataclass
class SweepResult:
    gamma_grid: list[float]
    accuracy: list[float]
    model_id: str
    config_hash: str
    m: int
    seed: int
    n: int

    def __post_init__(self):
        if len(self.gamma_grid) != len(self.accuracy):
            raise ValueError("gamma_grid and accuracy lengths differ")

    def rows(self):
        for g, a in zip(self.gamma_grid, self.accuracy):
            yield {"gamma": g, "accuracy": a, "m": self.m, "model_id": self.model_id,
                   "seed": self.seed, "config_hash": self.config_hash}

    def to_csv(self, path) -> None:
        _write_csv(path, ["gamma", "accuracy", "m", "model_id", "seed", "config_hash"], self.rows())


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (stop inclusive) or a comma list."""
    text = text.strip().strip("[]")
    if ":" in text:
        start, stop, step = (float(t) for t in text.split(":"))
        if step <= 0:
            raise ValueError("grid step must be positive")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(n)]
    return [float(t) for t in text.split(",") if t.strip()]


def sweep_gamma(net: Network, x, y, gamma_grid: Sequence[float], base_cfg: AttackConfig, m: int = 20,
                seed: int = 0, model_id: str = "model", mode: str = "mean_prob") -> SweepResult:
    grid = [float(g) for g in gamma_grid]
    if not grid or grid[0] != 0 or any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("gamma grid must be ascending and start at 0")
    accs = [accuracy_under_attack(net, x, y, base_cfg.with_(gamma=g), m, seed, mode=mode) for g in grid]
    h = config_hash({"attack": asdict(base_cfg), "m": m, "seed": seed, "grid": grid, "mode": mode})
    return SweepResult(grid, accs, model_id, h, m, seed, len(y))


def affinity(acc_b: float, acc_b_given_a: float, acc_b_given_b: float) -> float:
    """rho_{A->B} = (Acc[B] - Acc[B|A]) / (Acc[B] - Acc[B|B]).  Not clamped to [0, 1]."""
    denom = acc_b - acc_b_given_b
    if not denom > 0:
        raise UndefinedAffinityError(acc_b, acc_b_given_a, acc_b_given_b)
    return (acc_b - acc_b_given_a) / denom


@dataclass
class AffinityMatrix:
    model_ids: list[str]
    rho: np.ndarray
    acc_clean: np.ndarray          # Acc[B] per target
    acc_transfer: np.ndarray       # [source, target] -> Acc[B|A]
    seed: int = 0
    config_hash: str = ""

    def asymmetry(self) -> np.ndarray:
        return np.abs(self.rho - self.rho.T)

    def rows(self):
        for a, src in enumerate(self.model_ids):
            for b, tgt in enumerate(self.model_ids):
                yield {"source": src, "target": tgt, "acc_b": self.acc_clean[b],
                       "acc_b_given_a": self.acc_transfer[a, b], "rho": self.rho[a, b],
                       "seed": self.seed, "config_hash": self.config_hash}

    def to_csv(self, path) -> None:
        _write_csv(path, ["source", "target", "acc_b", "acc_b_given_a", "rho", "seed", "config_hash"],
                   self.rows())
        # plain matrix alongside, for heat-map plotting
        np.savetxt(Path(path).with_suffix("").as_posix() + "_matrix.txt", self.rho, fmt="%.6f")


def affinity_matrix(models: Mapping[str, Network], x, y, cfg: AttackConfig, m: int = 20,
                    seed: int = 0) -> AffinityMatrix:
    """Craft adversarial examples once per source, score every target on them.

    Undefined entries (target unaffected by its own attack) are NaN.
    """
    if len(models) < 2:
        raise ValueError("need at least two models")
    ids = list(models)
    nets = [models[i] for i in ids]
    n = len(ids)
    acc_clean = np.array([ensemble_accuracy(net, x, y, m, seed, stream=b) for b, net in enumerate(nets)])
    acc = np.zeros((n, n))
    for a, src in enumerate(nets):
        x_adv = craft_adversarial(src, x, y, cfg, seed, stream=a)
        for b, tgt in enumerate(nets):
            acc[a, b] = ensemble_accuracy(tgt, x_adv, y, m, seed, stream=b)
    rho = np.full((n, n), np.nan)
    for a in range(n):
        for b in range(n):
            try:
                rho[a, b] = affinity(acc_clean[b], acc[a, b], acc[b, b])
            except UndefinedAffinityError:
                pass
    h = config_hash({"attack": asdict(cfg), "m": m, "seed": seed, "models": ids})
    return AffinityMatrix(ids, rho, acc_clean, acc, seed, h)


@dataclass
class StudyTable:
    param_name: str
    rows_: list[tuple[float, float, float]] = field(default_factory=list)   # (param, gamma, accuracy)
    seed: int = 0
    config_hash: str = ""
    n: int = 0

    def accuracy(self, param, gamma) -> float:
        for p, g, a in self.rows_:
            if p == param and math.isclose(g, gamma, abs_tol=1e-12):
                return a
        raise KeyError((param, gamma))

    def rows(self):
        for p, g, a in self.rows_:
            yield {"param": p, "gamma": g, "accuracy": a, "seed": self.seed, "config_hash": self.config_hash}

    def to_csv(self, path) -> None:
        _write_csv(path, ["param", "gamma", "accuracy", "seed", "config_hash"], self.rows())


def ensemble_size_study(net: Network, x, y, m_grid: Sequence[int], gammas: Sequence[float],
                        base_cfg: AttackConfig, seed: int = 0) -> StudyTable:
    """Accuracy for each (m, gamma).  The attack does not depend on m, so it is crafted once per gamma."""
    if any(b < a for a, b in zip(m_grid, m_grid[1:])):
        raise ValueError("m_grid must be ascending")
    table = StudyTable("m", seed=seed, n=len(y),
                       config_hash=config_hash({"attack": asdict(base_cfg), "m_grid": list(m_grid),
                                                "gammas": list(gammas), "seed": seed}))
    for g in gammas:
        x_adv = craft_adversarial(net, x, y, base_cfg.with_(gamma=g), seed)
        for m in m_grid:
            table.rows_.append((int(m), float(g), ensemble_accuracy(net, x_adv, y, int(m), seed)))
    return table


def pgd_steps_study(net: Network, x, y, k_grid: Sequence[int], gamma: float, base_cfg: AttackConfig,
                    m: int = 20, seed: int = 0) -> StudyTable:
    if any(b < a for a, b in zip(k_grid, k_grid[1:])):
        raise ValueError("k_grid must be ascending")
    table = StudyTable("k", seed=seed, n=len(y),
                       config_hash=config_hash({"attack": asdict(base_cfg), "k_grid": list(k_grid),
                                                "gamma": gamma, "m": m, "seed": seed}))
    for k in k_grid:
        cfg = base_cfg.with_(gamma=gamma, k=int(k), step=None)
        table.rows_.append((int(k), float(gamma), accuracy_under_attack(net, x, y, cfg, m, seed)))
    return table


def local_lipschitz_estimate(net: Network, x, y, chunk: int = 1000) -> dict:
    """Per-example input-gradient norms of the loss at the posterior mean weights."""
    x = np.asarray(x, dtype=net.dtype)
    y = np.asarray(y)
    l2, l1 = [], []
    for _, sl in _chunks(len(x), chunk):
        g, _ = input_gradient(net, x[sl], y[sl], mean=net.stochastic)
        # the batch loss is a mean; undo the 1/B to get per-example gradients
        g = g.reshape(len(g), -1).astype(np.float64) * len(g)
        l2.append(np.linalg.norm(g, axis=1))
        l1.append(np.abs(g).sum(axis=1))
    l2 = np.concatenate(l2)
    l1 = np.concatenate(l1)
    return {"mean_l2": float(l2.mean()), "mean_l1": float(l1.mean()),
            "median_l2": float(np.median(l2)), "max_l2": float(l2.max()), "n": int(len(l2))}


def _write_csv(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


GNUPLOT_TEMPLATES = {
    "sweep": """set datafile separator ','
set key autotitle columnhead
set xlabel 'gamma (l-inf distortion)'
set ylabel 'accuracy'
set terminal pngcairo size 800,600
set output '{stem}.png'
plot '{csv}' using 1:2 with linespoints title '{title}'
""",
    "study": """set datafile separator ','
set key autotitle columnhead
set xlabel '{xlabel}'
set ylabel 'accuracy'
set logscale x
set terminal pngcairo size 800,600
set output '{stem}.png'
plot for [g in "{gammas}"] '{csv}' using 1:(abs($2-g)<1e-12 ? $3 : 1/0) with linespoints title 'gamma='.g
""",
    "affinity": """set datafile separator ','
set terminal pngcairo size 800,700
set output '{stem}.png'
set title 'transfer affinity (row: source, column: target)'
set cbrange [0:1]
plot '{stem}_matrix.txt' matrix with image
""",
}


def write_plot_script(kind: str, csv_path, title: str = "", xlabel: str = "", gammas=()) -> Path:
    """Emit a gnuplot script next to ``csv_path``; returns the script path."""
    csv_path = Path(csv_path)
    script = GNUPLOT_TEMPLATES[kind].format(stem=csv_path.with_suffix(""), csv=csv_path, title=title,
                                            xlabel=xlabel, gammas=" ".join(str(g) for g in gammas))
    out = csv_path.with_suffix(".gp")
    out.write_text(script)
    return out
