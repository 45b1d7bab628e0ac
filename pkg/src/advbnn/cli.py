"""Command-line entry point: ``advbnn <subcommand> [--key value ...]``.

Every RunConfig key is also a flag (``--gamma-train 0.03``).  Precedence is
defaults < data keys stored in the checkpoint < ``--config`` file < flags.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checks
from . import config as cfgmod
from . import nd_core as nd
from .bayes_net import Network, small_cnn
from .config import ConfigError, RunConfig
from .data_io import DataFormatError, Dataset, load_cifar_bin, load_idx, synth_blobs, synth_two_moons
from .eval_harness import (affinity_matrix, binomial_sigma, ensemble_accuracy,
                           ensemble_size_study, local_lipschitz_estimate, parse_grid, pgd_steps_study,
                           sweep_gamma, write_plot_script)
from .train_infer import CheckpointError, build_network, load_checkpoint, save_checkpoint, train

log = logging.getLogger("advbnn")

COMMANDS = {
    "train": "train one model (defense modes none, bnn, adv_train, adv_bnn)",
    "attack": "accuracy of one model on clean and attacked test points",
    "sweep": "accuracy over a grid of attack radii",
    "affinity": "transfer-attack affinity matrix between models",
    "ensemble-study": "accuracy versus ensemble size",
    "pgd-study": "accuracy versus number of attack steps",
    "lipschitz": "input-gradient norm statistics on train and test splits",
    "gradcheck": "finite-difference gradient suite",
    "selftest": "property self-test suite",
}
NEEDS_MODEL = {"attack", "sweep", "ensemble-study", "pgd-study", "lipschitz"}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advbnn", description="Adversarially trained Bayesian networks")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("gradcheck", "selftest"):
            continue
        if name == "affinity":
            p.add_argument("--model", nargs="+", required=True, help="two or more checkpoints")
        elif name in NEEDS_MODEL:
            p.add_argument("--model", required=True, help="checkpoint path")
        else:
            p.add_argument("--defense", dest="defense_mode", help="alias of --defense-mode")
        for f in fields(RunConfig):
            if name == "train" and f.name == "defense_mode":
                p.add_argument(_flag(f.name), dest="defense_mode")
                continue
            p.add_argument(_flag(f.name), dest=f.name, metavar=f.name.upper())
    return parser


def _overrides(args) -> dict:
    out = {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            out[f.name] = cfgmod.parse_value(f.name, v)
    return out


def _resolve(args, header: dict | None = None) -> RunConfig:
    layers = []
    if header is not None:
        stored = header.get("meta", {}).get("run_config", {})
        layers.append({k: cfgmod.parse_value(k, v) for k, v in stored.items() if k in cfgmod.DATA_KEYS})
    if args.config:
        layers.append(cfgmod.load(args.config))
    layers.append(_overrides(args))
    return cfgmod.resolve(*layers)


# ---------------------------------------------------------------- data and models


def load_data(rc: RunConfig) -> tuple[Dataset, Dataset]:
    if rc.dataset == "moons":
        tr = synth_two_moons(rc.n_train, rc.noise, rc.data_seed, "train")
        te = synth_two_moons(rc.n_test, rc.noise, rc.data_seed, "test")
    elif rc.dataset == "blobs":
        tr = synth_blobs(rc.n_train, rc.n_classes, rc.dim, rc.separation, rc.data_seed, "train")
        te = synth_blobs(rc.n_test, rc.n_classes, rc.dim, rc.separation, rc.data_seed, "test")
    elif rc.dataset == "idx":
        if not (rc.train_images and rc.train_labels and rc.test_images and rc.test_labels):
            raise ConfigError("dataset=idx needs train_images, train_labels, test_images, test_labels")
        tr = load_idx(rc.train_images, rc.train_labels, rc.n_classes, "train").subset(rc.n_train)
        te = load_idx(rc.test_images, rc.test_labels, rc.n_classes, "test").subset(rc.n_test)
    else:
        if not (rc.cifar_train and rc.cifar_test):
            raise ConfigError("dataset=cifar needs cifar_train and cifar_test (comma-separated paths)")
        tr = load_cifar_bin(rc.cifar_train.split(","), "train").subset(rc.n_train)
        te = load_cifar_bin(rc.cifar_test.split(","), "test").subset(rc.n_test)
    if rc.arch == "mlp" and tr.inputs.ndim > 2:
        tr = Dataset(tr.inputs.reshape(len(tr), -1), tr.labels, tr.n_classes, tr.split)
        te = Dataset(te.inputs.reshape(len(te), -1), te.labels, te.n_classes, te.split)
    dtype = np.float64 if rc.dtype == "float64" else np.float32
    return tr.astype(dtype), te.astype(dtype)


def make_network(rc: RunConfig, data: Dataset) -> Network:
    tc = rc.train_config()
    if data.inputs.ndim == 4:
        return small_cnn(data.inputs.shape[1:], data.n_classes, variational=tc.stochastic, channels=rc.channels,
                         hidden=rc.hidden[-1] if rc.hidden else 32, sigma0=rc.sigma0, alpha=rc.alpha,
                         seed=rc.seed)
    return build_network(tc, data.inputs.shape[1], data.n_classes, hidden=rc.hidden)


def _out_dir(rc: RunConfig) -> Path:
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rc.write(out / "config.txt")
    return out


def _model_id(rc: RunConfig, path) -> str:
    return rc.model_id or Path(path).stem


# ---------------------------------------------------------------- subcommands


def cmd_train(args) -> int:
    rc = _resolve(args)
    tr, te = load_data(rc)
    out = _out_dir(rc)
    net = make_network(rc, tr)
    result = train(net, tr.inputs, tr.labels, rc.train_config(), metrics_csv=out / "metrics.csv")
    meta = {"epochs": rc.epochs, "seed": rc.seed, "config_hash": rc.hash(),
            "run_config": {k: cfgmod.format_value(getattr(rc, k)) for k in cfgmod.DATA_KEYS}}
    ckpt = out / f"{rc.model_id or rc.defense_mode}.abnn"
    save_checkpoint(net, ckpt, rc.defense_mode, meta)
    acc = ensemble_accuracy(net, te.inputs, te.labels, rc.m, rc.seed)
    last = result.history[-1] if result.history else None
    print(f"trained {rc.defense_mode}: {net.n_params} params, test acc {acc:.4f} (m={rc.m})"
          + (f", final train loss {last.total:.4f}" if last else ""))
    print(f"checkpoint {ckpt}")
    print(f"metrics {out / 'metrics.csv'}")
    return 0


def _load_model(args):
    net, header = load_checkpoint(args.model)
    rc = _resolve(args, header)
    if rc.dtype == "float64" and net.dtype != np.float64:
        raise ConfigError("dtype=float64 requested but the checkpoint holds 32-bit arrays")
    _, te = load_data(rc.replace(dtype="float64" if net.dtype == np.float64 else "float32"))
    return net, rc, te.subset(rc.eval_size)


def cmd_attack(args) -> int:
    net, rc, te = _load_model(args)
    out = _out_dir(rc)
    acfg = rc.attack_config()
    res = sweep_gamma(net, te.inputs, te.labels, [0.0, acfg.gamma] if acfg.gamma > 0 else [0.0], acfg, rc.m,
                      rc.seed, _model_id(rc, args.model), rc.predict_mode)
    res.to_csv(out / "attack.csv")
    sig = binomial_sigma(res.accuracy[-1], len(te))
    print(f"clean acc {res.accuracy[0]:.4f}; acc at gamma={acfg.gamma:g} (k={acfg.k}, "
          f"{'eot' if acfg.eot and net.stochastic else 'fixed'}) {res.accuracy[-1]:.4f} +- {sig:.4f}")
    return 0


def cmd_sweep(args) -> int:
    net, rc, te = _load_model(args)
    out = _out_dir(rc)
    res = sweep_gamma(net, te.inputs, te.labels, parse_grid(rc.gammas), rc.attack_config(), rc.m, rc.seed,
                      _model_id(rc, args.model), rc.predict_mode)
    res.to_csv(out / "sweep.csv")
    write_plot_script("sweep", out / "sweep.csv", title=res.model_id)
    for g, a in zip(res.gamma_grid, res.accuracy):
        print(f"gamma={g:<8g} acc={a:.4f}")
    print(f"wrote {out / 'sweep.csv'} ({len(res.gamma_grid)} rows)")
    return 0


def cmd_affinity(args) -> int:
    if len(args.model) < 2:
        raise ConfigError("affinity needs at least two --model checkpoints")
    models = {}
    header = None
    for path in args.model:
        net, header = load_checkpoint(path)
        key = Path(path).stem
        if key in models:
            key = f"{key}_{len(models)}"
        models[key] = net
    rc = _resolve(args, header)
    dt = "float64" if next(iter(models.values())).dtype == np.float64 else "float32"
    _, te = load_data(rc.replace(dtype=dt))
    te = te.subset(rc.eval_size)
    out = _out_dir(rc)
    mat = affinity_matrix(models, te.inputs, te.labels, rc.attack_config(), rc.m, rc.seed)
    mat.to_csv(out / "affinity.csv")
    write_plot_script("affinity", out / "affinity.csv")
    width = max(len(i) for i in mat.model_ids)
    print(" " * width + "  " + "  ".join(f"{i:>{width}}" for i in mat.model_ids))
    for i, row in zip(mat.model_ids, mat.rho):
        print(f"{i:>{width}}  " + "  ".join(f"{v:>{width}.3f}" for v in row))
    print(f"wrote {out / 'affinity.csv'}")
    return 0


def cmd_ensemble_study(args) -> int:
    net, rc, te = _load_model(args)
    out = _out_dir(rc)
    acfg = rc.attack_config()
    gammas = parse_grid(rc.study_gammas) if rc.study_gammas else [0.0, acfg.gamma / 2, acfg.gamma]
    m_grid = [int(v) for v in parse_grid(rc.m_grid)]
    table = ensemble_size_study(net, te.inputs, te.labels, m_grid, gammas, acfg, rc.seed)
    table.to_csv(out / "ensemble_study.csv")
    write_plot_script("study", out / "ensemble_study.csv", xlabel="ensemble size m", gammas=gammas)
    for p, g, a in table.rows_:
        print(f"m={p:<4d} gamma={g:<8g} acc={a:.4f}")
    return 0


def cmd_pgd_study(args) -> int:
    net, rc, te = _load_model(args)
    out = _out_dir(rc)
    acfg = rc.attack_config()
    k_grid = [int(v) for v in parse_grid(rc.k_grid)]
    table = pgd_steps_study(net, te.inputs, te.labels, k_grid, acfg.gamma, acfg, rc.m, rc.seed)
    table.to_csv(out / "pgd_study.csv")
    write_plot_script("study", out / "pgd_study.csv", xlabel="PGD steps k", gammas=[acfg.gamma])
    for p, g, a in table.rows_:
        print(f"k={p:<5d} gamma={g:<8g} acc={a:.4f}")
    return 0


def cmd_lipschitz(args) -> int:
    net, header = load_checkpoint(args.model)
    rc = _resolve(args, header)
    tr, te = load_data(rc.replace(dtype="float64" if net.dtype == np.float64 else "float32"))
    out = _out_dir(rc)
    rows = []
    for ds in (tr.subset(rc.eval_size), te.subset(rc.eval_size)):
        stats = local_lipschitz_estimate(net, ds.inputs, ds.labels)
        rows.append({"split": ds.split, **stats})
        print(f"{ds.split:5s} mean_l2={stats['mean_l2']:.4f} mean_l1={stats['mean_l1']:.4f} "
              f"median_l2={stats['median_l2']:.4f} max_l2={stats['max_l2']:.4f} n={stats['n']}")
    with open(out / "lipschitz.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) + ["seed", "config_hash"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "seed": rc.seed, "config_hash": rc.hash()})
    return 0


def cmd_suite(args) -> int:
    suite = checks.gradcheck_suite() if args.command == "gradcheck" else checks.selftest_suite()
    passed, total = checks.run_suite(args.command, suite, verbose=args.verbose)
    return 0 if passed == total else 1


HANDLERS = {
    "train": cmd_train, "attack": cmd_attack, "sweep": cmd_sweep, "affinity": cmd_affinity,
    "ensemble-study": cmd_ensemble_study, "pgd-study": cmd_pgd_study, "lipschitz": cmd_lipschitz,
    "gradcheck": cmd_suite, "selftest": cmd_suite,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:     # usage errors exit 2, --help exits 0
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dtype_flag = getattr(args, "dtype", None)
        if dtype_flag is None and args.config:
            dtype_flag = cfgmod.load(args.config).get("dtype")
        with nd.precision(np.float64 if dtype_flag == "float64" else np.float32):
            return HANDLERS[args.command](args)
    except (ConfigError, CheckpointError, DataFormatError, OSError, ValueError, ArithmeticError) as e:
        print(f"advbnn {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
