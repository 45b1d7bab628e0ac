"""Transfer-attack affinity between the four desk models.

    python3 scripts/transfer_affinity.py --out results/affinity
"""
import argparse
from pathlib import Path

from advbnn.eval_harness import affinity_matrix, write_plot_script
from advbnn.experiments import DESK, load_or_train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/affinity")
    ap.add_argument("--models", default="results/models")
    ap.add_argument("--gamma", type=float, default=DESK.gamma)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nets = load_or_train(args.models)
    _, te = DESK.data()
    mat = affinity_matrix(nets, te.inputs, te.labels, DESK.attack(args.gamma), m=DESK.m)
    mat.to_csv(out / "affinity.csv")
    write_plot_script("affinity", out / "affinity.csv")
    ids = mat.model_ids
    print("source \\ target" + "".join(f"{i:>11s}" for i in ids))
    for i, row in zip(ids, mat.rho):
        print(f"{i:<15s}" + "".join(f"{v:>11.3f}" for v in row))
    print(f"max |rho(A->B) - rho(B->A)| = {mat.asymmetry().max():.3f}")


if __name__ == "__main__":
    main()
