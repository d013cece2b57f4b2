"""Freeze independent PYPOWER power-flow solutions for the bundled cases.

Requires the optional ``pypower`` package.  Output goes to tests/data/ and is
consumed by the solver oracle tests; rerun only if the bundled cases change.
"""

import json
from pathlib import Path

import numpy as np
from pypower.api import case39, case118, ppoption, runpf

OUT = Path(__file__).resolve().parents[1] / "tests" / "data"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    opts = ppoption(PF_ALG=1, PF_TOL=1e-11, PF_MAX_IT=30, ENFORCE_Q_LIMS=0, VERBOSE=0, OUT_ALL=0)
    for name, fn in [("case39", case39), ("case118", case118)]:
        res, ok = runpf(fn(), opts)
        assert ok, name
        bus = res["bus"]
        doc = {
            "solver": "pypower.runpf (Newton, PF_TOL=1e-11, no Q limits)",
            "bus_i": bus[:, 0].astype(int).tolist(),
            "vm": bus[:, 7].tolist(),
            "va_rad": np.deg2rad(bus[:, 8]).tolist(),
        }
        (OUT / f"reference_{name}.json").write_text(json.dumps(doc, indent=1) + "\n")
        print(name, "written")


if __name__ == "__main__":
    main()
