"""Train every arm on the desk-scale benchmark for several seeds and write reports.

    python scripts/run_arms.py --seeds 0 1 2 3 4 --out runs/arms
"""

import argparse

import numpy as np

from varco.experiment import ARM_PRESETS, run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--arms", nargs="+", default=list(ARM_PRESETS), choices=list(ARM_PRESETS))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra config override")
    ap.add_argument("--out", default="runs/arms")
    args = ap.parse_args()

    sweep = run_sweep(args.seeds, args.arms, extra=args.set, out_dir=args.out)
    print("\nfinal test accuracy (mean over seeds)")
    for arm in args.arms:
        acc = sweep.final_acc(arm)
        print(f"  {arm:7s} {acc.mean():.4f}  per seed {np.round(acc, 3).tolist()}")
    if {"varco", "fixed2", "full"} <= set(args.arms):
        cw = ["varco", "fixed2", "full"]
        for other in ("fixed2", "full"):
            frac = sweep.budget_wins("varco", other, cw).mean()
            print(f"varco >= {other} at {frac:.1%} of shared budget points")
    print(f"per-seed metrics and reports under {args.out}")


if __name__ == "__main__":
    main()
