"""Command-line entry point: ``gridflow <command> ...``."""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click

from . import acpf, case_io, datagen, evalbench, seiter
from .flownet import FlowNetConfig

log = logging.getLogger("gridflow")


def _case_arg(spec: str) -> case_io.GridCase:
    """A bundled case name (``case39``) or a path to ``.m``/``.json``."""
    if Path(spec).exists():
        return case_io.load_case(spec)
    try:
        return case_io.builtin_case(spec)
    except FileNotFoundError:
        raise click.BadParameter(f"{spec!r} is neither a file nor a bundled case")


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=1)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        click.echo(text)


def _configs(config_path: str | None, paper_scale: bool) -> tuple[seiter.SeIterConfig, FlowNetConfig]:
    cfg, net = seiter.PAPER_SCALE if paper_scale else seiter.DESK_SCALE
    if config_path:
        doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        unknown = set(doc) - {"seiter", "flownet"}
        if unknown:
            raise click.BadParameter(f"unknown config sections: {sorted(unknown)}")
        s = {k: v for k, v in doc.get("seiter", {}).items() if k != "schema"}
        f = {k: v for k, v in doc.get("flownet", {}).items() if k != "schema"}
        cfg, net = replace(cfg, **s), replace(net, **f)
    return cfg, net


def _load_items(data: str):
    ds = datagen.read_dataset(data)
    return ds, seiter.prepare(ds.base, ds.train), seiter.prepare(ds.base, ds.test)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """AC power flow and learned iterative state estimation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@main.command()
@click.argument("case_m", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", required=True, type=click.Path(dir_okay=False))
def parse(case_m: str, out: str) -> None:
    """Convert a MATPOWER case file to gridcase JSON."""
    try:
        case = case_io.load_matpower(case_m)
    except case_io.CaseError as e:
        raise click.ClickException(f"{type(e).__name__}: {e}")
    Path(out).write_text(case_io.to_json(case), encoding="utf-8")
    click.echo(f"{case.name}: {case.n_bus} buses, {len(case.branches)} branches -> {out}")


@main.command()
@click.argument("case_json")
@click.option("--tol", default=1e-8, show_default=True)
@click.option("--max-iter", default=20, show_default=True)
@click.option("-o", "--out", default=None, help="Write the result here instead of stdout.")
def solve(case_json: str, tol: float, max_iter: int, out: str | None) -> None:
    """Newton-Raphson power flow from flat start; exits 1 if it does not converge."""
    case = _case_arg(case_json)
    try:
        res = acpf.solve_nr(case, tol=tol, max_iter=max_iter)
    except (acpf.Diverged, acpf.SingularJacobian) as e:
        click.echo(f"{type(e).__name__}: {e}", err=True)
        sys.exit(1)
    _emit(
        {
            "case": case.name,
            "converged": res.converged,
            "iterations": res.iterations,
            "mismatch_norm": res.mismatch_norm,
            "bus_id": [b.id for b in case.buses],
            "vm": res.state.vm.tolist(),
            "va_rad": res.state.va.tolist(),
        },
        out,
    )
    if not res.converged:
        click.echo(f"not converged after {res.iterations} iterations (mismatch {res.mismatch_norm:.3g})", err=True)
        sys.exit(1)


@main.command()
@click.option("--case", "case_spec", required=True, help="Bundled case name or case file.")
@click.option("--n", required=True, type=int, help="Number of labelled samples.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--test-fraction", default=0.2, show_default=True)
@click.option("--workers", default=1, show_default=True)
def generate(case_spec: str, n: int, seed: int, out: str, test_fraction: float, workers: int) -> None:
    """Generate perturbed scenarios with NR labels and a topology-disjoint split."""
    base = _case_arg(case_spec)
    try:
        ds = datagen.generate(base, n, seed, test_fraction=test_fraction, workers=workers)
    except (datagen.ExcessiveDivergence, datagen.ExhaustedResampling) as e:
        raise click.ClickException(f"{type(e).__name__}: {e}")
    path = datagen.write_dataset(ds, out)
    m = ds.manifest
    click.echo(f"{m['n_train']} train / {m['n_test']} test ({m['n_failed']} failed solves) -> {path}")


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--paper-scale", is_flag=True, help="Start from the full-size preset (d=128, batch 256, 100 epochs).")
def train(data: str, config_path: str | None, out: str, paper_scale: bool) -> None:
    """Train a student/teacher pair; writes metrics.jsonl and checkpoints."""
    cfg, net = _configs(config_path, paper_scale)
    _, tr, te = _load_items(data)
    try:
        res = seiter.train(tr, te, cfg, net, out)
    except seiter.NonFiniteLoss as e:
        raise click.ClickException(f"{e} (last good checkpoints kept in {out})")
    click.echo(json.dumps(res.metrics[-1], sort_keys=True))


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--case", "case_spec", required=True)
@click.option("--loops", default=8, show_default=True)
@click.option("-o", "--out", default=None)
def infer(ckpt: str, case_spec: str, loops: int, out: str | None) -> None:
    """Estimate the state of one case with a trained teacher."""
    params, net, _ = seiter.load_model(ckpt)
    case = _case_arg(case_spec)
    state, traj = seiter.infer(case, params, net, loops)
    _emit(
        {
            "case": case.name,
            "loops": loops,
            "bus_id": [b.id for b in case.buses],
            "vm": state.vm.tolist(),
            "va_rad": state.va.tolist(),
            "mismatch_norm_per_loop": traj.mismatch_norm,
        },
        out,
    )


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--loops", default=None, type=int, help="Defaults to the trained loop count.")
@click.option("--rho", default=0.0, show_default=True, help="Fraction of buses with Q hidden.")
@click.option("--group", default="pq", type=click.Choice(["pq", "pv"]), show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("-o", "--out", default=None)
def eval_cmd(ckpt: str, data: str, loops: int | None, rho: float, group: str, seed: int, out: str | None) -> None:
    """RMSE on the test split, per loop."""
    params, net, cfg = seiter.load_model(ckpt)
    _, _, te = _load_items(data)
    rep = evalbench.missing_q_eval(params, net, te, loops or cfg.loops, rho, seed, group, cfg.eval_batch_size)
    rep.fingerprint = evalbench.config_fingerprint(net, cfg)
    _emit(rep.to_dict(), out)


@main.command()
@click.option("--case", "case_spec", required=True)
@click.option("--ckpt", default=None, type=click.Path(exists=True, dir_okay=False), help="Omit to time NR only.")
@click.option("--loops", default=8, show_default=True)
@click.option("--repeats", default=3, show_default=True)
@click.option("-o", "--out", default=None)
def contingency(case_spec: str, ckpt: str | None, loops: int, repeats: int, out: str | None) -> None:
    """Full N-2 analysis with NR and the model, timing both."""
    case = _case_arg(case_spec)
    params, net = (None, None)
    if ckpt:
        params, net, _ = seiter.load_model(ckpt)
    summary = evalbench.contingency_n2(case, params, net, loops, repeats)
    d = summary.to_dict()
    click.echo(
        f"{d['n_cases']} connected pairs of {d['n_candidate_pairs']}; "
        f"NR total {d['nr_total_s']:.3f}s, model total {d['model_total_s']:.3f}s",
        err=True,
    )
    _emit(d, out)


@main.command()
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", default=None, type=click.Path(exists=True, file_okay=False), help="Overrides grid 'data'.")
@click.option("--out", default=None, type=click.Path(file_okay=False))
def ablate(grid_path: str, data: str | None, out: str | None) -> None:
    """Train and score a grid of architecture flags with SeIter on/off.

    The grid file holds ``data``, optional ``seiter``/``flownet`` overrides and
    ``rows``: a list of ``{name, fusion, vna, sgf, seiter}``.  Without rows
    the full five-row grid is run in both regimes.
    """
    doc = json.loads(Path(grid_path).read_text(encoding="utf-8"))
    data = data or doc.get("data")
    if not data:
        raise click.BadParameter("no dataset given (--data or 'data' in the grid file)")
    cfg, net = seiter.DESK_SCALE
    cfg = replace(cfg, **{k: v for k, v in doc.get("seiter", {}).items() if k != "schema"})
    net = replace(net, **{k: v for k, v in doc.get("flownet", {}).items() if k != "schema"})
    rows = doc.get("rows")
    grid = None if rows is None else [evalbench.GridEntry(**r) for r in rows]
    _, tr, te = _load_items(data)
    results = evalbench.ablate(tr, te, cfg, net, grid, out)
    table = evalbench.ablation_table_csv(results)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "ablation.csv").write_text(table, encoding="utf-8")
        (Path(out) / "ablation.json").write_text(
            json.dumps([{**vars(r.entry), **r.report.to_dict()} for r in results], sort_keys=True, indent=1) + "\n"
        )
    click.echo(table, nl=False)
    best = min(results, key=lambda r: r.report.rmse_pv_va)
    click.echo(f"lowest PV va RMSE: {best.entry.name} (seiter={best.entry.seiter}) {best.report.rmse_pv_va:.6f}")


if __name__ == "__main__":  # pragma: no cover
    main()
