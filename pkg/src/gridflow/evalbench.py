"""Evaluation: pooled RMSE reports, loop sweeps, missing-Q robustness,
ablation grids and N-2 contingency timing."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .acpf import Diverged, SingularJacobian, flat_start, newton_raphson
from .case_io import GridCase
from .flownet import FlowNetConfig, GraphBatch, GraphData, collate, graph_data
from .network import build_ybus, is_connected
from .seiter import SeIterConfig, batches, infer_batch, train
from .tensor_ad import Params

GROUPS = ("pq_vm", "pq_va", "pv_va")


class EmptyGroup(ValueError):
    pass


def rmse(pred, label) -> float:
    pred = np.asarray(pred, dtype=float).ravel()
    label = np.asarray(label, dtype=float).ravel()
    if pred.shape != label.shape:
        raise ValueError(f"prediction/label sizes differ: {pred.shape} vs {label.shape}")
    if pred.size == 0:
        raise EmptyGroup("no values to score")
    return float(np.sqrt(np.mean((pred - label) ** 2)))


def config_fingerprint(*configs) -> str:
    blob = json.dumps([c.to_dict() if hasattr(c, "to_dict") else c for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class EvalReport:
    rmse_pq_vm: float
    rmse_pq_va: float
    rmse_pv_va: float
    n_samples: int
    fingerprint: str = ""
    curves: dict[str, list[float]] = field(default_factory=dict)
    mismatch_curve: list[float] = field(default_factory=list)

    def final_metrics(self) -> dict[str, float]:
        return {"rmse_pq_vm": self.rmse_pq_vm, "rmse_pq_va": self.rmse_pq_va, "rmse_pv_va": self.rmse_pv_va}

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def _pool(batch: GraphBatch, vm, va):
    return {
        "pq_vm": (vm[batch.pq], batch.label_vm[batch.pq]),
        "pq_va": (va[batch.pq], batch.label_va[batch.pq]),
        "pv_va": (va[batch.pv], batch.label_va[batch.pv]),
    }


def evaluate_items(
    teacher: Params,
    net: FlowNetConfig,
    items: list[GraphData],
    loops: int,
    batch_size: int = 256,
    q_present_fn=None,
    fingerprint: str = "",
) -> EvalReport:
    """Run iterative inference over ``items`` and score every loop in one pass.

    ``q_present_fn(batch)`` may return a presence mask to hide Q inputs.
    """
    sq = {g: np.zeros(loops) for g in GROUPS}
    counts = {g: 0 for g in GROUPS}
    worst = np.zeros(loops + 1)
    for batch in batches(items, batch_size):
        if q_present_fn is not None:
            batch = batch.with_q_mask(q_present_fn(batch))
        traj = infer_batch(batch, teacher, net, loops)
        worst = np.maximum(worst, traj.mismatch_norm)
        for k in range(loops):
            for g, (p, l) in _pool(batch, traj.vm[k + 1], traj.va[k + 1]).items():
                sq[g][k] += float(((p - l) ** 2).sum())
        for g, (p, _) in _pool(batch, traj.vm[0], traj.va[0]).items():
            counts[g] += p.size
    for g in GROUPS:
        if counts[g] == 0:
            raise EmptyGroup(f"group {g} is empty")
    curves = {f"rmse_{g}": [float(np.sqrt(s / counts[g])) for s in sq[g]] for g in GROUPS}
    return EvalReport(
        curves["rmse_pq_vm"][-1],
        curves["rmse_pq_va"][-1],
        curves["rmse_pv_va"][-1],
        len(items),
        fingerprint,
        curves,
        [float(x) for x in worst],
    )


def loop_sweep(teacher, net, items, loops_list, batch_size: int = 256) -> dict[int, dict[str, float]]:
    """Final-loop RMSE for each loop count in ``loops_list``."""
    out = {}
    for loops in loops_list:
        rep = evaluate_items(teacher, net, items, loops, batch_size)
        out[int(loops)] = rep.final_metrics()
    return out


def q_mask(rho: float, seed: int, group: str = "pq"):
    """Mask factory hiding Q on a random ``rho`` fraction of the named bus group."""
    rng = np.random.default_rng(seed)
    code = {"pq": 0, "pv": 1}[group]

    def fn(batch: GraphBatch) -> np.ndarray:
        present = np.ones(batch.n)
        rows = np.flatnonzero(batch.node_type == code)
        k = int(round(rho * len(rows)))
        if k:
            present[rng.choice(rows, size=k, replace=False)] = 0.0
        return present

    return fn


def missing_q_eval(teacher, net, items, loops: int, rho: float, seed: int = 0, group: str = "pq", batch_size: int = 256) -> EvalReport:
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    fn = None if rho == 0 else q_mask(rho, seed, group)
    return evaluate_items(teacher, net, items, loops, batch_size, q_present_fn=fn)


# -- ablation -----------------------------------------------------------------------

ABLATION_ROWS = (
    ("Base", {"fusion": False, "vna": False, "sgf": False}),
    ("Base+Fusion", {"fusion": True, "vna": False, "sgf": False}),
    ("Base+Fusion+VNA", {"fusion": True, "vna": True, "sgf": False}),
    ("Base+Fusion+SGF", {"fusion": True, "vna": False, "sgf": True}),
    ("Base+Fusion+VNA+SGF", {"fusion": True, "vna": True, "sgf": True}),
)


def no_seiter(cfg: SeIterConfig) -> SeIterConfig:
    """The end-to-end regime: one loop and no equation loss."""
    return replace(cfg, loops=1, lambda_equ=0.0)


@dataclass(frozen=True)
class GridEntry:
    name: str
    fusion: bool
    vna: bool
    sgf: bool
    seiter: bool

    @property
    def flags(self) -> dict:
        return {"fusion": self.fusion, "vna": self.vna, "sgf": self.sgf}


def ablation_grid(rows=ABLATION_ROWS, seiter_modes=(False, True)) -> list[GridEntry]:
    """The rows x {SeIter off, on} grid."""
    return [GridEntry(name, seiter=s, **flags) for s in seiter_modes for name, flags in rows]


@dataclass
class AblationRow:
    entry: GridEntry
    report: EvalReport


def ablate(
    train_items,
    test_items,
    cfg: SeIterConfig,
    net: FlowNetConfig,
    grid: list[GridEntry] | None = None,
    out_dir: str | Path | None = None,
) -> list[AblationRow]:
    """Train and score every grid entry under otherwise identical settings."""
    results = []
    for e in ablation_grid() if grid is None else grid:
        c = cfg if e.seiter else no_seiter(cfg)
        n = replace(net, **e.flags)
        sub = None if out_dir is None else Path(out_dir) / f"{'seiter' if e.seiter else 'plain'}-{e.name}"
        res = train(train_items, [], c, n, sub)
        rep = evaluate_items(res.teacher, n, test_items, c.loops, c.eval_batch_size, fingerprint=config_fingerprint(n, c))
        results.append(AblationRow(e, rep))
    return results


def ablation_table_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["seiter", "model", "fusion", "vna", "sgf", "rmse_pq_vm", "rmse_pq_va", "rmse_pv_va"])
    for r in rows:
        e = r.entry
        w.writerow(
            [int(e.seiter), e.name, int(e.fusion), int(e.vna), int(e.sgf)]
            + [f"{v:.8f}" for v in r.report.final_metrics().values()]
        )
    return buf.getvalue()


# -- contingency ----------------------------------------------------------------------


@dataclass
class ContingencyResult:
    dropped: tuple[int, int]
    converged: bool
    solve_time: float
    model_time: float
    max_discrepancy: float


@dataclass
class ContingencySummary:
    results: list[ContingencyResult]
    n_candidates: int
    nr_total_time: float
    model_total_time: float
    repeats: int

    @property
    def nr_mean_time(self) -> float:
        return self.nr_total_time / max(len(self.results), 1)

    @property
    def model_mean_time(self) -> float:
        return self.model_total_time / max(len(self.results), 1)

    def to_dict(self) -> dict:
        disc = [r.max_discrepancy for r in self.results if r.converged and np.isfinite(r.max_discrepancy)]
        return {
            "n_cases": len(self.results),
            "n_candidate_pairs": self.n_candidates,
            "n_not_converged": sum(not r.converged for r in self.results),
            "nr_total_s": self.nr_total_time,
            "model_total_s": self.model_total_time,
            "nr_mean_s": self.nr_mean_time,
            "model_mean_s": self.model_mean_time,
            "repeats": self.repeats,
            "discrepancy_quantiles": (
                {q: float(np.quantile(disc, float(q))) for q in ("0.5", "0.9", "0.99", "1.0")} if disc else {}
            ),
            # NaN (no model, or NR failed) becomes null to keep the JSON strict
            "cases": [
                {**asdict(r), "max_discrepancy": r.max_discrepancy if np.isfinite(r.max_discrepancy) else None}
                for r in self.results
            ],
        }


def n2_pairs(case: GridCase) -> list[tuple[int, int]]:
    """All unordered in-service branch pairs whose removal keeps the grid connected."""
    live = [int(k) for k in case.in_service()]
    return [(a, b) for a, b in itertools.combinations(live, 2) if is_connected(case, (a, b))]


def contingency_n2(
    case: GridCase,
    teacher: Params | None,
    net: FlowNetConfig | None,
    loops: int = 8,
    repeats: int = 3,
    batch_size: int = 256,
    pairs: list[tuple[int, int]] | None = None,
) -> ContingencySummary:
    """Solve every connected N-2 topology with NR and with the model, timing both.

    Only the numeric kernels are timed (Ybus assembly and flat start
    included for NR, batched inference for the model); each kernel time is
    the median of ``repeats`` runs.
    """
    live = case.in_service()
    n_candidates = len(live) * (len(live) - 1) // 2
    pairs = n2_pairs(case) if pairs is None else pairs
    cases = [case.drop_branches(pr) for pr in pairs]
    p, q = case.injections()
    pq, pv = case.pq, case.pv

    nr_states, nr_ok, nr_times = [], [], []
    for c in cases:
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            try:
                res = newton_raphson(build_ybus(c), p, q, flat_start(c), pq, pv, 1e-8, 20)
                ok = res.converged
                state = res.state
            except (Diverged, SingularJacobian):
                ok, state = False, None
            times.append(time.perf_counter() - t0)
        nr_times.append(statistics.median(times))
        nr_ok.append(ok)
        nr_states.append(state)

    model_times = [0.0] * len(cases)
    disc = [float("nan")] * len(cases)
    if teacher is not None:
        items = [graph_data(c) for c in cases]
        for start in range(0, len(items), batch_size):
            chunk = items[start : start + batch_size]
            batch = collate(chunk)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                traj = infer_batch(batch, teacher, net, loops)
                times.append(time.perf_counter() - t0)
            per = statistics.median(times) / len(chunk)
            vm, va = traj.final
            off = 0
            for k, g in enumerate(chunk):
                idx = start + k
                model_times[idx] = per
                if nr_ok[idx]:
                    s = nr_states[idx]
                    disc[idx] = float(
                        max(np.abs(vm[off : off + g.n] - s.vm).max(), np.abs(va[off : off + g.n] - s.va).max())
                    )
                off += g.n
    results = [
        ContingencyResult(pr, ok, t_nr, t_m, d)
        for pr, ok, t_nr, t_m, d in zip(pairs, nr_ok, nr_times, model_times, disc)
    ]
    return ContingencySummary(results, n_candidates, float(sum(nr_times)), float(sum(model_times)), repeats)
