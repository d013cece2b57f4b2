"""Iterative-loop efficacy on case39: full model vs gcn-only, both with SeIter.

    python3 scripts/efficacy.py --n 5000 --d 64 --epochs 20 --out runs/efficacy
"""

import argparse
import json
import logging

from gridflow import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--case", default="case39")
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--loops", type=int, default=8)
    ap.add_argument("--lambda-equ", type=float, default=experiments.TUNED_LAMBDA)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-baseline", action="store_true")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    split = experiments.dataset(args.case, args.n, args.seed)
    runs = experiments.efficacy(
        split, args.d, args.epochs, args.loops, args.seed, args.lambda_equ, args.out, not args.no_baseline
    )
    for name, r in runs.items():
        curve = r.report.curves["rmse_pq_va"]
        print(json.dumps({"model": name, "minutes": round(r.seconds / 60, 1), "pq_va_per_loop": curve,
                          **r.report.final_metrics()}))


if __name__ == "__main__":
    main()
