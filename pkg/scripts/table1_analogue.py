"""Accuracy under EOT-PGD for the four defense modes over the standard radius grid.

    python3 scripts/table1_analogue.py --out results/table1
"""
import argparse
from pathlib import Path

from advbnn.eval_harness import binomial_sigma, parse_grid, sweep_gamma, write_plot_script
from advbnn.experiments import DESK, load_or_train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/table1")
    ap.add_argument("--gammas", default="0:0.12:0.01")
    ap.add_argument("--models", default="results/models")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nets = load_or_train(args.models)
    _, te = DESK.data()
    grid = parse_grid(args.gammas)
    table = {}
    for mode, net in nets.items():
        res = sweep_gamma(net, te.inputs, te.labels, grid, DESK.attack(), DESK.m, model_id=mode)
        res.to_csv(out / f"sweep_{mode}.csv")
        write_plot_script("sweep", out / f"sweep_{mode}.csv", title=mode)
        table[mode] = res.accuracy
    print("gamma   " + "".join(f"{m:>11s}" for m in table))
    for i, g in enumerate(grid):
        print(f"{g:<8.3f}" + "".join(f"{table[m][i]:>11.3f}" for m in table))
    print(f"binomial sigma at p=0.8, n={len(te)}: {binomial_sigma(0.8, len(te)):.4f}")


if __name__ == "__main__":
    main()
