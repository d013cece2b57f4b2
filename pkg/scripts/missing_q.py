"""Train with Q-input dropout, then score with a growing fraction of hidden Q.

    python3 scripts/missing_q.py --n 2000 --mask-prob 0.1 --out runs/missing_q
"""

import argparse
import json
import logging

from gridflow import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--case", default="case39")
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--d", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--loops", type=int, default=8)
    ap.add_argument("--mask-prob", type=float, default=0.1)
    ap.add_argument("--rhos", type=float, nargs="+", default=[0.0, 0.05, 0.1, 0.2])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    split = experiments.dataset(args.case, args.n, args.seed)
    reports = experiments.missing_q(
        split, tuple(args.rhos), args.d, args.epochs, args.loops, 0, args.mask_prob, out_dir=args.out
    )
    for rho, rep in reports.items():
        print(json.dumps({"rho": rho, **rep.final_metrics()}))


if __name__ == "__main__":
    main()
