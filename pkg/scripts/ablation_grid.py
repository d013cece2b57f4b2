"""Architecture x SeIter ablation grid on perturbed case39 scenarios.

    python3 scripts/ablation_grid.py --n 1000 --d 32 --epochs 10 --out runs/ablation
"""

import argparse
import logging

from gridflow import experiments
from gridflow.evalbench import ablation_table_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--case", default="case39")
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--d", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--loops", type=int, default=8)
    ap.add_argument("--lambda-equ", type=float, default=experiments.TUNED_LAMBDA)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    split = experiments.dataset(args.case, args.n, args.seed)
    rows = experiments.ablation(
        split, args.d, args.epochs, args.loops, args.seed, args.lambda_equ, args.out
    )
    print(ablation_table_csv(rows), end="")
    best = min(rows, key=lambda r: r.report.rmse_pv_va)
    print(f"lowest PV va RMSE: {best.entry.name} seiter={best.entry.seiter}")


if __name__ == "__main__":
    main()
