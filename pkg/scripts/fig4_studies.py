"""Ensemble-size and attack-step studies on the adv_bnn desk model.

    python3 scripts/fig4_studies.py --out results/fig4
"""
import argparse
from pathlib import Path

from advbnn.eval_harness import ensemble_size_study, pgd_steps_study, write_plot_script
from advbnn.experiments import DESK, load_or_train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/fig4")
    ap.add_argument("--models", default="results/models")
    ap.add_argument("--m-grid", default="1,2,5,10,20,40,80")
    ap.add_argument("--k-grid", default="0,1,2,5,10,20,50,100,200,500")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net = load_or_train(args.models, modes=("adv_bnn",))["adv_bnn"]
    _, te = DESK.data()
    gammas = [0.0, DESK.gamma / 2, DESK.gamma]
    m_grid = [int(v) for v in args.m_grid.split(",")]
    k_grid = [int(v) for v in args.k_grid.split(",")]

    ens = ensemble_size_study(net, te.inputs, te.labels, m_grid, gammas, DESK.attack())
    ens.to_csv(out / "ensemble_size.csv")
    write_plot_script("study", out / "ensemble_size.csv", xlabel="ensemble size m", gammas=gammas)
    for m in m_grid:
        print(f"m={m:<4d}" + "".join(f"  gamma={g:<6g}{ens.accuracy(m, g):.3f}" for g in gammas))

    steps = pgd_steps_study(net, te.inputs, te.labels, k_grid, DESK.gamma, DESK.attack(), m=DESK.m)
    steps.to_csv(out / "pgd_steps.csv")
    write_plot_script("study", out / "pgd_steps.csv", xlabel="PGD steps k", gammas=[DESK.gamma])
    for k in k_grid:
        print(f"k={k:<4d} acc={steps.accuracy(k, DESK.gamma):.3f}")


if __name__ == "__main__":
    main()
