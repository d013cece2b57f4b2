"""Reusable desk-scale experiment recipes shared by scripts/ and the acceptance suite.

Every recipe is seeded by its arguments alone. Run artifacts go under
``out_dir`` when one is given.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .case_io import builtin_case
from .datagen import Dataset, generate, write_dataset
from .evalbench import (
    AblationRow,
    EvalReport,
    GridEntry,
    ablate,
    ablation_table_csv,
    config_fingerprint,
    evaluate_items,
    missing_q_eval,
)
from .flownet import FlowNetConfig
from .seiter import SeIterConfig, TrainResult, prepare, train

# lambda_equ picked by a sweep over {1, 0.1, 0} at small scale; see README.
TUNED_LAMBDA = 0.1
GCN_ONLY = {"fusion": False, "vna": False, "sgf": False}


@dataclass
class Split:
    dataset: Dataset
    train: list
    test: list


def dataset(case: str, n: int, seed: int) -> Split:
    base = builtin_case(case)
    ds = generate(base, n, seed)
    return Split(ds, prepare(base, ds.train), prepare(base, ds.test))


@dataclass
class RunReport:
    result: TrainResult
    report: EvalReport
    seconds: float
    out_dir: Path | None


def run(split: Split, cfg: SeIterConfig, net: FlowNetConfig, out_dir: str | Path | None = None) -> RunReport:
    """Train, then score the teacher on the test split at the trained loop count."""
    t0 = time.perf_counter()
    res = train(split.train, [], cfg, net, out_dir)
    rep = evaluate_items(res.teacher, net, split.test, cfg.loops, cfg.eval_batch_size, fingerprint=config_fingerprint(net, cfg))
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        (out / "test_report.json").write_text(rep.to_json() + "\n")
    return RunReport(res, rep, time.perf_counter() - t0, out)


def efficacy(
    split: Split,
    d: int = 64,
    epochs: int = 20,
    loops: int = 8,
    seed: int = 0,
    lambda_equ: float = TUNED_LAMBDA,
    out_dir: str | Path | None = None,
    with_baseline: bool = True,
) -> dict[str, RunReport]:
    """Full model with SeIter, plus the gcn-only model trained identically."""
    cfg = SeIterConfig(loops=loops, epochs=epochs, seed=seed, lambda_equ=lambda_equ)
    net = FlowNetConfig(d=d)
    out = None if out_dir is None else Path(out_dir)
    runs = {"full": run(split, cfg, net, out and out / "full")}
    if with_baseline:
        runs["gcn_only"] = run(split, cfg, replace(net, **GCN_ONLY), out and out / "gcn_only")
    return runs


def ablation(
    split: Split,
    d: int = 32,
    epochs: int = 10,
    loops: int = 8,
    seed: int = 0,
    lambda_equ: float = TUNED_LAMBDA,
    out_dir: str | Path | None = None,
    grid: list[GridEntry] | None = None,
) -> list[AblationRow]:
    cfg = SeIterConfig(loops=loops, epochs=epochs, seed=seed, lambda_equ=lambda_equ)
    rows = ablate(split.train, split.test, cfg, FlowNetConfig(d=d), grid, out_dir)
    if out_dir is not None:
        Path(out_dir, "ablation.csv").write_text(ablation_table_csv(rows))
    return rows


def missing_q(
    split: Split,
    rhos=(0.0, 0.05, 0.1, 0.2),
    d: int = 32,
    epochs: int = 10,
    loops: int = 8,
    seed: int = 0,
    mask_prob: float = 0.1,
    lambda_equ: float = TUNED_LAMBDA,
    out_dir: str | Path | None = None,
) -> dict[float, EvalReport]:
    """Train with Q-input dropout, then score at several test-time mask fractions."""
    cfg = SeIterConfig(loops=loops, epochs=epochs, seed=seed, lambda_equ=lambda_equ, q_mask_prob=mask_prob)
    net = FlowNetConfig(d=d)
    res = train(split.train, [], cfg, net, out_dir)
    reports = {rho: missing_q_eval(res.teacher, net, split.test, loops, rho, seed) for rho in rhos}
    if out_dir is not None:
        Path(out_dir, "missing_q.json").write_text(
            json.dumps({str(r): rep.final_metrics() for r, rep in reports.items()}, sort_keys=True, indent=1) + "\n"
        )
    return reports


def save_dataset(split: Split, out_dir: str | Path) -> Path:
    return write_dataset(split.dataset, out_dir)
