"""Final-loop RMSE of a trained teacher at several loop counts.

    python3 scripts/loop_sweep.py --ckpt runs/efficacy/full/teacher.ckpt --data data/case39 --loops 1 2 4 8 12
"""

import argparse
import json

from gridflow.datagen import read_dataset
from gridflow.evalbench import loop_sweep
from gridflow.seiter import load_model, prepare


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--loops", type=int, nargs="+", default=[1, 2, 4, 8, 12])
    args = ap.parse_args()

    teacher, net, _ = load_model(args.ckpt)
    ds = read_dataset(args.data)
    for loops, m in loop_sweep(teacher, net, prepare(ds.base, ds.test), args.loops).items():
        print(json.dumps({"loops": loops, **m}))


if __name__ == "__main__":
    main()
