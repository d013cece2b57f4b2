"""Power-balance mismatch and Newton-Raphson AC power flow."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .case_io import GridCase
from .network import AdmittanceMatrix, build_ybus


class DimensionMismatch(ValueError):
    pass


class SingularJacobian(ArithmeticError):
    pass


class Diverged(ArithmeticError):
    pass


DIVERGENCE_LIMIT = 1e6
PIVOT_FLOOR = 1e-12


@dataclass(frozen=True)
class PowerFlowState:
    vm: np.ndarray
    va: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vm", np.asarray(self.vm, dtype=float))
        object.__setattr__(self, "va", np.asarray(self.va, dtype=float))
        if self.vm.shape != self.va.shape or self.vm.ndim != 1:
            raise DimensionMismatch("vm and va must be 1-D arrays of equal length")

    def copy(self) -> "PowerFlowState":
        return PowerFlowState(self.vm.copy(), self.va.copy())


@dataclass(frozen=True)
class Mismatch:
    """``dp`` over ``p_idx`` (PV then PQ buses), ``dq`` over ``q_idx`` (PQ buses)."""

    dp: np.ndarray
    dq: np.ndarray
    p_idx: np.ndarray
    q_idx: np.ndarray

    def max_norm(self) -> float:
        parts = [np.abs(self.dp), np.abs(self.dq)]
        return float(max((p.max() for p in parts if p.size), default=0.0))


@dataclass(frozen=True)
class NRResult:
    state: PowerFlowState
    iterations: int
    converged: bool
    mismatch_norm: float


def calc_injections(vm, va, ybus: AdmittanceMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Injections implied by the voltages: sums run over stored Y entries only."""
    vm = np.asarray(vm, dtype=float)
    va = np.asarray(va, dtype=float)
    if vm.shape != (ybus.n,) or va.shape != (ybus.n,):
        raise DimensionMismatch(f"state length {vm.shape} does not match Ybus size {ybus.n}")
    i, j = ybus.rows, ybus.cols
    theta = va[i] - va[j]
    vv = vm[i] * vm[j]
    cos, sin = np.cos(theta), np.sin(theta)
    p = np.bincount(i, weights=vv * (ybus.g * cos + ybus.b * sin), minlength=ybus.n)
    q = np.bincount(i, weights=vv * (ybus.g * sin - ybus.b * cos), minlength=ybus.n)
    return p, q


def bus_mismatch(vm, va, ybus, p_spec, q_spec) -> tuple[np.ndarray, np.ndarray]:
    """Full-length ``(dP, dQ)`` at every bus."""
    p_spec = np.asarray(p_spec, dtype=float)
    q_spec = np.asarray(q_spec, dtype=float)
    if p_spec.shape != (ybus.n,) or q_spec.shape != (ybus.n,):
        raise DimensionMismatch("injection vectors must have one entry per bus")
    p, q = calc_injections(vm, va, ybus)
    return p_spec - p, q_spec - q


def mismatch(state: PowerFlowState, ybus: AdmittanceMatrix, p_spec, q_spec, pq, pv) -> Mismatch:
    dp, dq = bus_mismatch(state.vm, state.va, ybus, p_spec, q_spec)
    p_idx = np.concatenate([np.asarray(pv, dtype=np.int64), np.asarray(pq, dtype=np.int64)])
    q_idx = np.asarray(pq, dtype=np.int64)
    return Mismatch(dp[p_idx], dq[q_idx], p_idx, q_idx)


def case_mismatch(case: GridCase, state: PowerFlowState, ybus=None) -> Mismatch:
    ybus = build_ybus(case) if ybus is None else ybus
    p, q = case.injections()
    return mismatch(state, ybus, p, q, case.pq, case.pv)


def flat_start(case: GridCase) -> PowerFlowState:
    """PQ magnitudes at 1 p.u., PV/slack at setpoint, every angle at the slack angle."""
    vm, va = case.setpoints()
    vm = vm.copy()
    vm[case.pq] = 1.0
    va = np.full(case.n_bus, va[case.slack])
    return PowerFlowState(vm, va)


def jacobian(vm, va, ybus: AdmittanceMatrix, pq, pv) -> np.ndarray:
    """Dense Jacobian of the calculated injections w.r.t. ``[va(pv,pq); vm(pq)]``."""
    y = ybus.to_dense()
    v = vm * np.exp(1j * va)
    ibus = y @ v
    vnorm = np.exp(1j * va)
    ds_dva = 1j * v[:, None] * np.conj(np.diag(ibus) - y * v[None, :])
    ds_dvm = v[:, None] * np.conj(y * vnorm[None, :]) + np.diag(np.conj(ibus) * vnorm)
    pvpq = np.concatenate([pv, pq])
    j11 = ds_dva[np.ix_(pvpq, pvpq)].real
    j12 = ds_dvm[np.ix_(pvpq, pq)].real
    j21 = ds_dva[np.ix_(pq, pvpq)].imag
    j22 = ds_dvm[np.ix_(pq, pq)].imag
    return np.block([[j11, j12], [j21, j22]])


def newton_raphson(
    ybus: AdmittanceMatrix,
    p_spec,
    q_spec,
    init: PowerFlowState,
    pq,
    pv,
    tol: float = 1e-8,
    max_iter: int = 20,
) -> NRResult:
    if tol <= 0:
        raise ValueError("tol must be positive")
    pq = np.asarray(pq, dtype=np.int64)
    pv = np.asarray(pv, dtype=np.int64)
    pvpq = np.concatenate([pv, pq])
    npvpq = len(pvpq)
    vm = init.vm.copy()
    va = init.va.copy()

    def residual():
        dp, dq = bus_mismatch(vm, va, ybus, p_spec, q_spec)
        return np.concatenate([dp[pvpq], dq[pq]])

    f = residual()
    norm = float(np.abs(f).max()) if f.size else 0.0
    it = 0
    while norm >= tol and it < max_iter:
        it += 1
        jac = jacobian(vm, va, ybus, pq, pv)
        lu, piv = scipy.linalg.lu_factor(jac, check_finite=False)
        if np.abs(np.diag(lu)).min() < PIVOT_FLOOR:
            raise SingularJacobian(f"LU pivot below {PIVOT_FLOOR} at iteration {it}")
        dx = scipy.linalg.lu_solve((lu, piv), f, check_finite=False)
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        f = residual()
        norm = float(np.abs(f).max())
        if not np.isfinite(norm) or norm > DIVERGENCE_LIMIT:
            raise Diverged(f"mismatch norm {norm:.3g} at iteration {it}")
    return NRResult(PowerFlowState(vm, va), it, norm < tol, norm)


def solve_nr(
    case: GridCase,
    init: PowerFlowState | None = None,
    tol: float = 1e-8,
    max_iter: int = 20,
    ybus: AdmittanceMatrix | None = None,
) -> NRResult:
    ybus = build_ybus(case) if ybus is None else ybus
    init = flat_start(case) if init is None else init
    if init.vm.shape != (case.n_bus,) or not (init.vm > 0).all():
        raise ValueError("init must have one positive magnitude per bus")
    p, q = case.injections()
    return newton_raphson(ybus, p, q, init, case.pq, case.pv, tol, max_iter)


def jacobian_fd_check(case: GridCase, state: PowerFlowState, eps: float = 1e-6) -> float:
    """Max relative error between the analytic Jacobian and central differences."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    ybus = build_ybus(case)
    pq, pv = case.pq, case.pv
    pvpq = np.concatenate([pv, pq])
    analytic = jacobian(state.vm, state.va, ybus, pq, pv)

    def calc(x):
        vm = state.vm.copy()
        va = state.va.copy()
        va[pvpq] = x[: len(pvpq)]
        vm[pq] = x[len(pvpq):]
        p, q = calc_injections(vm, va, ybus)
        return np.concatenate([p[pvpq], q[pq]])

    x0 = np.concatenate([state.va[pvpq], state.vm[pq]])
    fd = np.empty_like(analytic)
    for k in range(len(x0)):
        xp, xm = x0.copy(), x0.copy()
        xp[k] += eps
        xm[k] -= eps
        fd[:, k] = (calc(xp) - calc(xm)) / (2 * eps)
    mask = (np.abs(fd) > 1e-8) | (np.abs(analytic) > 1e-8)
    if not mask.any():
        return 0.0
    err = np.abs(analytic - fd)[mask] / np.maximum(np.abs(fd), np.abs(analytic))[mask]
    return float(err.max())
