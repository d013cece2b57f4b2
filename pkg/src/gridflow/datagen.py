"""Perturbed-scenario generation with Newton-Raphson labels.

Each attempt ``k`` draws from its own stream ``default_rng([seed, k])`` so the
output depends only on ``(base, n, seed)`` and attempts can be evaluated in any
order.  Loads on PQ buses are scaled by U(0.5, 1.5), branch r/x/b by
U(0.9, 1.1), and one or two in-service lines are opened (count uniform over
{1, 2}) subject to the network staying connected.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .acpf import Diverged, SingularJacobian, bus_mismatch, flat_start, newton_raphson
from .case_io import BusType, GridCase, case_to_dict, dumps_canonical, from_json, to_json
from .network import build_ybus, is_connected

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "dataset/1"
SPLIT_STREAM = 0x5EED5
LABEL_TOL = 1e-8


class ExhaustedResampling(RuntimeError):
    pass


class ExcessiveDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbConfig:
    load_range: tuple[float, float] = (0.5, 1.5)
    branch_range: tuple[float, float] = (0.9, 1.1)
    drop_counts: tuple[int, ...] = (1, 2)
    max_resample: int = 100


@dataclass
class Sample:
    """One labelled scenario stored as a delta against the base case."""

    index: int
    dropped_lines: tuple[int, ...]
    p_load: np.ndarray
    q_load: np.ndarray
    r: np.ndarray
    x: np.ndarray
    b_charging: np.ndarray
    vm: np.ndarray
    va: np.ndarray
    iterations: int = 0

    def to_case(self, base: GridCase) -> GridCase:
        buses = [
            replace(b, p_load=float(self.p_load[i]), q_load=float(self.q_load[i]))
            for i, b in enumerate(base.buses)
        ]
        drop = set(self.dropped_lines)
        branches = [
            replace(
                br,
                r=float(self.r[k]),
                x=float(self.x[k]),
                b_charging=float(self.b_charging[k]),
                status=br.status and k not in drop,
            )
            for k, br in enumerate(base.branches)
        ]
        return replace(base, buses=tuple(buses), branches=tuple(branches))

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "dropped_lines": list(self.dropped_lines),
            "p_load": self.p_load.tolist(),
            "q_load": self.q_load.tolist(),
            "r": self.r.tolist(),
            "x": self.x.tolist(),
            "b_charging": self.b_charging.tolist(),
            "vm": self.vm.tolist(),
            "va": self.va.tolist(),
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        arr = lambda k: np.asarray(d[k], dtype=float)  # noqa: E731
        return cls(
            int(d["index"]),
            tuple(int(i) for i in d["dropped_lines"]),
            arr("p_load"),
            arr("q_load"),
            arr("r"),
            arr("x"),
            arr("b_charging"),
            arr("vm"),
            arr("va"),
            int(d.get("iterations", 0)),
        )


def perturb(
    base: GridCase, rng: np.random.Generator, cfg: PerturbConfig = PerturbConfig()
) -> tuple[GridCase, tuple[int, ...]]:
    """Randomly rescale PQ loads and branch parameters and open 1-2 lines."""
    lo, hi = cfg.load_range
    buses = []
    for b in base.buses:
        if b.bus_type is BusType.PQ:
            b = replace(b, p_load=b.p_load * rng.uniform(lo, hi), q_load=b.q_load * rng.uniform(lo, hi))
        buses.append(b)
    lo, hi = cfg.branch_range
    branches = []
    for br in base.branches:
        s = rng.uniform(lo, hi, size=3)
        branches.append(replace(br, r=br.r * s[0], x=br.x * s[1], b_charging=br.b_charging * s[2]))
    case = replace(base, buses=tuple(buses), branches=tuple(branches))

    k = int(rng.choice(cfg.drop_counts))
    if k == 0:
        return case, ()
    candidates = base.in_service()
    for _ in range(cfg.max_resample):
        drop = tuple(sorted(int(i) for i in rng.choice(candidates, size=k, replace=False)))
        if is_connected(case, drop):
            return case.drop_branches(drop), drop
    raise ExhaustedResampling(f"no connected topology after {cfg.max_resample} draws")


def _attempt(base: GridCase, seed: int, k: int, cfg: PerturbConfig) -> Sample | None:
    rng = np.random.default_rng([seed, k])
    case, drop = perturb(base, rng, cfg)
    ybus = build_ybus(case)
    p, q = case.injections()
    try:
        res = newton_raphson(ybus, p, q, flat_start(case), case.pq, case.pv, LABEL_TOL, 20)
    except (Diverged, SingularJacobian):
        return None
    if not res.converged:
        return None
    return Sample(
        index=k,
        dropped_lines=drop,
        p_load=np.array([b.p_load for b in case.buses]),
        q_load=np.array([b.q_load for b in case.buses]),
        r=np.array([br.r for br in case.branches]),
        x=np.array([br.x for br in case.branches]),
        b_charging=np.array([br.b_charging for br in case.branches]),
        vm=res.state.vm,
        va=res.state.va,
        iterations=res.iterations,
    )


def label_mismatch(base: GridCase, s: Sample) -> float:
    """Max |dP|, |dQ| of a sample's stored labels under its own Ybus."""
    case = s.to_case(base)
    dp, dq = bus_mismatch(s.vm, s.va, build_ybus(case), *case.injections())
    return float(max(np.abs(dp[np.r_[case.pv, case.pq]]).max(), np.abs(dq[case.pq]).max()))


@dataclass
class Dataset:
    base: GridCase
    train: list[Sample]
    test: list[Sample]
    manifest: dict = field(default_factory=dict)


def split_by_topology(samples: list[Sample], seed: int, test_fraction: float = 0.2):
    """Assign whole topologies to the test split until it holds ~``test_fraction``."""
    counts: dict[tuple[int, ...], int] = {}
    for s in samples:
        counts[s.dropped_lines] = counts.get(s.dropped_lines, 0) + 1
    topos = sorted(counts)
    order = np.random.default_rng([seed, SPLIT_STREAM]).permutation(len(topos))
    target = round(test_fraction * len(samples))
    test_topos, n_test = set(), 0
    for i in order:
        if n_test >= target:
            break
        test_topos.add(topos[i])
        n_test += counts[topos[i]]
    train = [s for s in samples if s.dropped_lines not in test_topos]
    test = [s for s in samples if s.dropped_lines in test_topos]
    return train, test


def generate(
    base: GridCase,
    n: int,
    seed: int,
    cfg: PerturbConfig = PerturbConfig(),
    test_fraction: float = 0.2,
    workers: int = 1,
    max_fail_rate: float = 0.05,
) -> Dataset:
    if n < 10:
        raise ValueError("n must be at least 10")
    samples: list[Sample] = []
    failed: list[int] = []
    limit = max_fail_rate / (1.0 - max_fail_rate) * n
    k = 0
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        while len(samples) < n:
            need = n - len(samples)
            ks = range(k, k + need)
            if pool is None:
                results = [_attempt(base, seed, i, cfg) for i in ks]
            else:
                results = list(pool.map(_attempt, *zip(*[(base, seed, i, cfg) for i in ks])))
            for i, r in zip(ks, results):
                if r is None:
                    failed.append(i)
                else:
                    samples.append(r)
            k += need
            if len(failed) > limit:
                raise ExcessiveDivergence(
                    f"{len(failed)} of {k} power-flow solves failed (> {max_fail_rate:.0%})"
                )
    finally:
        if pool is not None:
            pool.shutdown()
    train, test = split_by_topology(samples, seed, test_fraction)
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "base_case": base.name,
        "n_train": len(train),
        "n_test": len(test),
        "seed": seed,
        "split_rule": f"topology-disjoint, test fraction {test_fraction}, greedy over shuffled topologies",
        "perturbation": {
            "load_range": list(cfg.load_range),
            "branch_range": list(cfg.branch_range),
            "drop_count_rule": f"uniform over {list(cfg.drop_counts)}",
        },
        "n_attempts": k,
        "n_failed": len(failed),
        "failed_indices": failed,
        "train_topologies": sorted({list_key(s) for s in train}),
        "test_topologies": sorted({list_key(s) for s in test}),
    }
    return Dataset(base, train, test, manifest)


def list_key(s: Sample) -> tuple[int, ...]:
    return tuple(s.dropped_lines)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(ds: Dataset, out: str | Path, shard_size: int = 5000) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    base_path = out / "base_case.json"
    base_path.write_text(to_json(ds.base), encoding="utf-8")
    files.append({"path": base_path.name, "split": "base", "n": 1, "sha256": _sha256(base_path)})
    for split, samples in (("train", ds.train), ("test", ds.test)):
        for j in range(0, max(len(samples), 1), shard_size):
            chunk = samples[j : j + shard_size]
            path = out / f"{split}-{j // shard_size:05d}.jsonl"
            with open(path, "w", encoding="utf-8") as fh:
                for s in chunk:
                    fh.write(dumps_canonical(s.to_dict()) + "\n")
            files.append({"path": path.name, "split": split, "n": len(chunk), "sha256": _sha256(path)})
    manifest = dict(ds.manifest)
    manifest["train_topologies"] = [list(t) for t in manifest["train_topologies"]]
    manifest["test_topologies"] = [list(t) for t in manifest["test_topologies"]]
    manifest["files"] = files
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def read_dataset(root: str | Path, verify: bool = True) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"manifest schema {manifest.get('schema')!r} != {MANIFEST_SCHEMA!r}")
    base = None
    splits: dict[str, list[Sample]] = {"train": [], "test": []}
    for f in manifest["files"]:
        path = root / f["path"]
        if verify and _sha256(path) != f["sha256"]:
            raise ValueError(f"{path}: content hash mismatch")
        if f["split"] == "base":
            base = from_json(path.read_text(encoding="utf-8"))
            continue
        with open(path, encoding="utf-8") as fh:
            splits[f["split"]].extend(Sample.from_dict(json.loads(line)) for line in fh if line.strip())
    if base is None:
        raise ValueError("dataset has no base case")
    return Dataset(base, splits["train"], splits["test"], manifest)


def topology_overlap(manifest: dict) -> set[tuple[int, ...]]:
    """Topologies present in both splits; empty for a valid dataset."""
    train = {tuple(t) for t in manifest["train_topologies"]}
    test = {tuple(t) for t in manifest["test_topologies"]}
    return train & test


def dataset_fingerprint(ds: Dataset) -> str:
    h = hashlib.sha256(dumps_canonical(case_to_dict(ds.base)).encode())
    for s in ds.train + ds.test:
        h.update(dumps_canonical(s.to_dict()).encode())
    return h.hexdigest()[:16]
