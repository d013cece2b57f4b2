"""Self-ensembling iterative training and inference.

Per mini-batch the loop state starts from the flat initialisation and, for
each loop, (a) the power mismatch is evaluated at the current state, (b) the
student predicts increments, (c) ``loss_gt + lambda * loss_equ`` is minimised
with one Adam step, (d) the teacher is moved toward the student by EMA and
(e) the teacher's prediction becomes the next loop's state.  States are plain
arrays between loops, so no gradient crosses a loop boundary or reaches the
teacher.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_ad as ad
from .acpf import bus_mismatch
from .case_io import GridCase
from .datagen import Sample
from .flownet import FlowNetConfig, GraphBatch, GraphData, Prediction, collate, forward, graph_data, init_params
from .network import AdmittanceMatrix
from .tensor_ad import AdamState, Params, Tensor, adam_step, cosine_lr, no_grad

log = logging.getLogger(__name__)

CONFIG_SCHEMA = "seiter/1"


class DimensionMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class DataExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class SeIterConfig:
    loops: int = 8
    lambda_equ: float = 1.0
    alpha_ema: float = 0.99
    epochs: int = 20
    batch_size: int = 64
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    seed: int = 0
    q_mask_prob: float = 0.0
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.loops < 1:
            raise ValueError("loops must be >= 1")
        if not 0.0 < self.alpha_ema < 1.0:
            raise ValueError("alpha_ema must lie in (0, 1)")
        if self.lambda_equ < 0:
            raise ValueError("lambda_equ must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {"schema": CONFIG_SCHEMA, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "SeIterConfig":
        d = dict(d)
        d.pop("schema", None)
        return cls(**d)


DESK_SCALE = (SeIterConfig(), FlowNetConfig(d=64))
PAPER_SCALE = (SeIterConfig(epochs=100, batch_size=256), FlowNetConfig(d=128))


# -- losses -----------------------------------------------------------------------


def predicted_state(pred: Prediction, batch: GraphBatch, vm: np.ndarray, va: np.ndarray) -> tuple[Tensor, Tensor]:
    """Differentiable full-length ``(vm, va)`` with PQ/PV unknowns replaced by predictions."""
    n = batch.n
    vm_c = vm.copy()
    vm_c[batch.pq] = 0.0
    va_c = va.copy()
    va_c[batch.pq] = 0.0
    va_c[batch.pv] = 0.0
    vm_pq = ad.add(Tensor(vm[batch.pq]), pred.dvm_pq)
    va_pq = ad.add(Tensor(va[batch.pq]), pred.dva_pq)
    va_pv = ad.add(Tensor(va[batch.pv]), pred.dva_pv)
    vm_full = ad.add(Tensor(vm_c), ad.scatter_add(vm_pq, batch.pq, n))
    va_full = ad.add(
        Tensor(va_c), ad.add(ad.scatter_add(va_pq, batch.pq, n), ad.scatter_add(va_pv, batch.pv, n))
    )
    return vm_full, va_full


def loss_gt(vm: Tensor, va: Tensor, batch: GraphBatch) -> Tensor:
    """Mean L1 over PQ magnitude and angle plus mean L1 over PV angle."""
    if batch.label_vm is None:
        raise DimensionMismatch("batch carries no labels")
    if vm.shape != (batch.n,) or va.shape != (batch.n,):
        raise DimensionMismatch(f"state length {vm.shape} != {batch.n}")
    pq, pv = batch.pq, batch.pv
    loss = ad.add(
        ad.l1_loss(ad.gather(vm, pq), Tensor(batch.label_vm[pq])),
        ad.l1_loss(ad.gather(va, pq), Tensor(batch.label_va[pq])),
    )
    if len(pv):
        loss = ad.add(loss, ad.l1_loss(ad.gather(va, pv), Tensor(batch.label_va[pv])))
    return loss


def mismatch_tensors(vm: Tensor, va: Tensor, ybus: AdmittanceMatrix, p_spec, q_spec) -> tuple[Tensor, Tensor]:
    """Differentiable full-length ``(dP, dQ)``."""
    i, j = ybus.rows, ybus.cols
    theta = ad.sub(ad.gather(va, i), ad.gather(va, j))
    vv = ad.mul(ad.gather(vm, i), ad.gather(vm, j))
    c, s = ad.cos(theta), ad.sin(theta)
    g, b = Tensor(ybus.g), Tensor(ybus.b)
    tp = ad.mul(vv, ad.add(ad.mul(g, c), ad.mul(b, s)))
    tq = ad.mul(vv, ad.sub(ad.mul(g, s), ad.mul(b, c)))
    dp = ad.sub(Tensor(p_spec), ad.scatter_add(tp, i, ybus.n))
    dq = ad.sub(Tensor(q_spec), ad.scatter_add(tq, i, ybus.n))
    return dp, dq


def loss_equ(vm: Tensor, va: Tensor, ybus: AdmittanceMatrix, p_spec, q_spec, pq, pv) -> Tensor:
    """Mean |dP| + |dQ| over PQ buses plus mean |dP| over PV buses."""
    if vm.shape != (ybus.n,) or va.shape != (ybus.n,):
        raise DimensionMismatch(f"state length {vm.shape} does not match Ybus size {ybus.n}")
    dp, dq = mismatch_tensors(vm, va, ybus, p_spec, q_spec)
    loss = ad.add(ad.mean(ad.abs_(ad.gather(dp, pq))), ad.mean(ad.abs_(ad.gather(dq, pq))))
    if len(pv):
        loss = ad.add(loss, ad.mean(ad.abs_(ad.gather(dp, pv))))
    return loss


def ema_update(teacher: Params, student: Params, alpha: float) -> Params:
    """``teacher <- alpha * teacher + (1 - alpha) * student``, in place."""
    return teacher.blend_(student, alpha)


# -- data plumbing ------------------------------------------------------------------


def prepare(base: GridCase, samples: list[Sample]) -> list[GraphData]:
    return [graph_data(s.to_case(base), s.vm, s.va) for s in samples]


def batches(items: list[GraphData], size: int, order=None):
    order = np.arange(len(items)) if order is None else order
    for k in range(0, len(order), size):
        yield collate([items[i] for i in order[k : k + size]])


def loop_inputs(batch: GraphBatch, vm, va) -> tuple[np.ndarray, np.ndarray]:
    dp, dq = bus_mismatch(vm, va, batch.ybus, batch.p_spec, batch.q_spec)
    return dp, dq


# -- inference ------------------------------------------------------------------------


@dataclass
class Trajectory:
    """States after each loop (index 0 = initialisation) and their mismatch norms."""

    vm: list[np.ndarray]
    va: list[np.ndarray]
    mismatch_norm: list[float]

    @property
    def final(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vm[-1], self.va[-1]


def _mismatch_norm(batch: GraphBatch, dp, dq) -> float:
    pvpq = np.concatenate([batch.pv, batch.pq])
    return float(max(np.abs(dp[pvpq]).max(initial=0.0), np.abs(dq[batch.pq]).max(initial=0.0)))


def infer_batch(batch: GraphBatch, teacher: Params, cfg: FlowNetConfig, loops: int) -> Trajectory:
    if loops < 1:
        raise ValueError("loops must be >= 1")
    vm, va = batch.init_state()
    traj = Trajectory([vm], [va], [])
    with no_grad():
        for _ in range(loops):
            dp, dq = loop_inputs(batch, vm, va)
            traj.mismatch_norm.append(_mismatch_norm(batch, dp, dq))
            vm, va = forward(batch, vm, va, dp, dq, teacher, cfg).apply(batch, vm, va)
            traj.vm.append(vm)
            traj.va.append(va)
    dp, dq = loop_inputs(batch, vm, va)
    traj.mismatch_norm.append(_mismatch_norm(batch, dp, dq))
    return traj


def infer(case: GridCase, teacher: Params, cfg: FlowNetConfig, loops: int = 8):
    """Estimate one case's state; returns ``(PowerFlowState, Trajectory)``."""
    from .acpf import PowerFlowState

    batch = collate([graph_data(case)])
    traj = infer_batch(batch, teacher, cfg, loops)
    vm, va = traj.final
    return PowerFlowState(vm, va), traj


# -- training -----------------------------------------------------------------------------


@dataclass
class TrainResult:
    student: Params
    teacher: Params
    metrics: list[dict] = field(default_factory=list)


def _fmt(x: float) -> float:
    # fixed significant digits keep the metrics log byte-stable and readable
    return float(f"{x:.10g}")


def train(
    train_items: list[GraphData],
    val_items: list[GraphData],
    cfg: SeIterConfig,
    net: FlowNetConfig,
    out_dir: str | Path | None = None,
    evaluate_fn=None,
) -> TrainResult:
    """Train a student/teacher pair; ``evaluate_fn(teacher, net, items, loops)`` gives val metrics."""
    if not train_items:
        raise DataExhausted("no training samples")
    rng = np.random.default_rng(cfg.seed)
    student = init_params(net, rng)
    teacher = student.copy()
    opt = AdamState()
    n_batches = math.ceil(len(train_items) / cfg.batch_size)
    total = cfg.epochs * n_batches * cfg.loops
    step = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
    metrics = []
    if evaluate_fn is None:
        from .evalbench import evaluate_items as evaluate_fn
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_items))
        sums = np.zeros(3)
        count = 0
        for batch in batches(train_items, cfg.batch_size, order):
            if cfg.q_mask_prob > 0:
                keep = rng.random(batch.n) >= cfg.q_mask_prob
                present = np.where(batch.node_type == 0, keep, 1.0)
                batch = batch.with_q_mask(present)
            vm, va = batch.init_state()
            for _ in range(cfg.loops):
                dp, dq = loop_inputs(batch, vm, va)
                student.zero_grad()
                pred = forward(batch, vm, va, dp, dq, student, net)
                vm_hat, va_hat = predicted_state(pred, batch, vm, va)
                l_gt = loss_gt(vm_hat, va_hat, batch)
                if cfg.lambda_equ > 0:
                    l_eq = loss_equ(vm_hat, va_hat, batch.ybus, batch.p_spec, batch.q_spec, batch.pq, batch.pv)
                    loss = ad.add(l_gt, ad.scale(l_eq, cfg.lambda_equ))
                else:
                    with no_grad():
                        l_eq = loss_equ(vm_hat, va_hat, batch.ybus, batch.p_spec, batch.q_spec, batch.pq, batch.pv)
                    loss = l_gt
                if not np.isfinite(loss.item()):
                    if out is not None:
                        _save_pair(out, student, teacher, net, cfg, suffix=".last-good")
                    raise NonFiniteLoss(f"loss became {loss.item()} at epoch {epoch}, step {step}")
                loss.backward()
                lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min)
                adam_step(student, student.grads(), lr, opt)
                step += 1
                ema_update(teacher, student, cfg.alpha_ema)
                with no_grad():
                    vm, va = forward(batch, vm, va, dp, dq, teacher, net).apply(batch, vm, va)
                sums += (loss.item(), l_gt.item(), l_eq.item())
                count += 1
        record = {
            "epoch": epoch,
            "lr": _fmt(cosine_lr(step, total, cfg.lr_max, cfg.lr_min)),
            "train_loss": _fmt(sums[0] / count),
            "train_loss_gt": _fmt(sums[1] / count),
            "train_loss_equ": _fmt(sums[2] / count),
        }
        if val_items:
            report = evaluate_fn(teacher, net, val_items, cfg.loops, cfg.eval_batch_size)
            record.update({f"val_{k}": _fmt(v) for k, v in report.final_metrics().items()})
            record["val_rmse_pq_va_loop1"] = _fmt(report.curves["rmse_pq_va"][0])
        metrics.append(record)
        log.info("epoch %d %s", epoch, record)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    if out is not None:
        _save_pair(out, student, teacher, net, cfg)
    return TrainResult(student, teacher, metrics)


def checkpoint_meta(net: FlowNetConfig, cfg: SeIterConfig, role: str) -> dict:
    return {"role": role, "flownet": net.to_dict(), "seiter": cfg.to_dict()}


def _save_pair(out: Path, student, teacher, net, cfg, suffix: str = "") -> None:
    ad.save_checkpoint(out / f"student{suffix}.ckpt", student, checkpoint_meta(net, cfg, "student"))
    ad.save_checkpoint(out / f"teacher{suffix}.ckpt", teacher, checkpoint_meta(net, cfg, "teacher"))
    (out / "config.json").write_text(
        json.dumps({"flownet": net.to_dict(), "seiter": cfg.to_dict()}, sort_keys=True, indent=1) + "\n"
    )


def load_model(path: str | Path) -> tuple[Params, FlowNetConfig, SeIterConfig]:
    params, meta = ad.load_checkpoint(path)
    return params, FlowNetConfig.from_dict(meta["flownet"]), SeIterConfig.from_dict(meta["seiter"])
