"""Convex toy: gradient-norm floor under fixed compression versus an annealed schedule.

    python scripts/toy_plateau.py --seeds 0 1 2 --out runs/toy.csv
"""

import argparse
import csv

from varco.experiment import TOY_FIXED, plateau, toy_plateau


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--eta", type=float, default=1.0)
    ap.add_argument("--biased", action="store_true", help="use the zero-fill codec without rescaling")
    ap.add_argument("--out", help="write per-epoch gradient norms as CSV")
    args = ap.parse_args()

    rows = []
    names = [f"r={r:g}" for r in TOY_FIXED] + ["varco"]
    print("seed " + " ".join(f"{n:>10s}" for n in names) + "  varco_min")
    for s in args.seeds:
        tr = toy_plateau(s, args.epochs, args.eta, unbiased=not args.biased)
        print(f"{s:4d} " + " ".join(f"{plateau(tr[n]):10.3e}" for n in names) + f"  {tr['varco'].min():.3e}")
        for t in range(args.epochs):
            rows.append([s, t] + [repr(float(tr[n][t])) for n in names])
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "epoch"] + names)
            w.writerows(rows)


if __name__ == "__main__":
    main()
