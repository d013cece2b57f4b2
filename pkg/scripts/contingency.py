"""N-2 contingency sweep: every connected branch-pair outage, NR vs a trained model.

    python3 scripts/contingency.py --case case39 --ckpt runs/efficacy/full/teacher.ckpt
"""

import argparse
import json

from gridflow.case_io import builtin_case, load_case
from gridflow.evalbench import contingency_n2
from gridflow.seiter import load_model


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--case", default="case39")
    ap.add_argument("--ckpt", default=None)
    ap.add_argument("--loops", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    case = load_case(args.case) if args.case.endswith((".m", ".json")) else builtin_case(args.case)
    teacher, net = (None, None)
    if args.ckpt:
        teacher, net, _ = load_model(args.ckpt)
    d = contingency_n2(case, teacher, net, args.loops, args.repeats).to_dict()
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(d, fh, sort_keys=True, indent=1)
    d.pop("cases")
    print(json.dumps(d, indent=1))


if __name__ == "__main__":
    main()
