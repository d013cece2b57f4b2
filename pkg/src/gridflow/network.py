"""Nodal admittance matrix and the typed graph view of a grid case."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .case_io import BusType, GridCase


class ZeroImpedanceBranch(ValueError):
    pass


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Sparse ``Y = G + jB`` in coordinate form, one entry per (row, col), sorted."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    g: np.ndarray
    b: np.ndarray

    def to_dense(self) -> np.ndarray:
        y = np.zeros((self.n, self.n), dtype=complex)
        y[self.rows, self.cols] = self.g + 1j * self.b
        return y

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.g + 1j * self.b, (self.rows, self.cols)), shape=(self.n, self.n))

    @property
    def entries(self) -> dict[tuple[int, int], tuple[float, float]]:
        return {
            (int(i), int(j)): (float(g), float(b))
            for i, j, g, b in zip(self.rows, self.cols, self.g, self.b)
        }


def branch_admittances(case: GridCase) -> tuple[np.ndarray, ...]:
    """Per in-service branch: ``(idx, f, t, yff, yft, ytf, ytt)`` complex arrays."""
    idx = case.in_service()
    brs = [case.branches[k] for k in idx]
    f = np.array([br.from_bus for br in brs], dtype=np.int64)
    t = np.array([br.to_bus for br in brs], dtype=np.int64)
    r = np.array([br.r for br in brs], dtype=float)
    x = np.array([br.x for br in brs], dtype=float)
    bc = np.array([br.b_charging for br in brs], dtype=float)
    tap = np.array([br.tap for br in brs], dtype=float)
    shift = np.array([br.shift for br in brs], dtype=float)
    bad = (r == 0) & (x == 0)
    if bad.any():
        raise ZeroImpedanceBranch(f"branches {idx[bad].tolist()} have r = x = 0")
    ys = 1.0 / (r + 1j * x)
    ytt = ys + 0.5j * bc
    yff = ytt / tap**2
    yft = -ys / (tap * np.exp(-1j * shift))
    ytf = -ys / (tap * np.exp(1j * shift))
    return idx, f, t, yff, yft, ytf, ytt


def build_ybus(case: GridCase) -> AdmittanceMatrix:
    n = case.n_bus
    _, f, t, yff, yft, ytf, ytt = branch_admittances(case)
    shunt = np.array([b.gs + 1j * b.bs for b in case.buses])
    diag = np.arange(n)
    rows = np.concatenate([f, f, t, t, diag])
    cols = np.concatenate([f, t, f, t, diag])
    vals = np.concatenate([yff, yft, ytf, ytt, shunt])
    y = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    y.sum_duplicates()
    y.sort_indices()
    coo = y.tocoo()
    # keep the diagonal even when it is exactly zero so isolated buses still have a row
    return AdmittanceMatrix(
        n,
        coo.row.astype(np.int64),
        coo.col.astype(np.int64),
        coo.data.real.copy(),
        coo.data.imag.copy(),
    )


EDGE_FEATURES = ("g_series", "b_series", "b_half_charging", "tap", "shift")


@dataclass(frozen=True)
class HeteroGraph:
    """Bus groups by type plus a directed edge list (two per in-service branch)."""

    n: int
    pq: np.ndarray
    pv: np.ndarray
    slack: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_feat: np.ndarray  # (E, 5)
    branch_of_edge: np.ndarray

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def node_type(self) -> np.ndarray:
        """0 = PQ, 1 = PV, 2 = Slack, indexed by bus."""
        out = np.empty(self.n, dtype=np.int64)
        out[self.pq] = 0
        out[self.pv] = 1
        out[self.slack] = 2
        return out


def build_hetero_graph(case: GridCase) -> HeteroGraph:
    idx = case.in_service()
    src, dst, feats, owner = [], [], [], []
    for k in idx:
        br = case.branches[k]
        ys = 1.0 / complex(br.r, br.x)
        feat = [ys.real, ys.imag, 0.5 * br.b_charging, br.tap, br.shift]
        for a, b in ((br.from_bus, br.to_bus), (br.to_bus, br.from_bus)):
            src.append(a)
            dst.append(b)
            feats.append(feat)
            owner.append(k)
    return HeteroGraph(
        n=case.n_bus,
        pq=case.indices(BusType.PQ),
        pv=case.indices(BusType.PV),
        slack=case.indices(BusType.SLACK),
        src=np.array(src, dtype=np.int64),
        dst=np.array(dst, dtype=np.int64),
        edge_feat=np.array(feats, dtype=float).reshape(-1, len(EDGE_FEATURES)),
        branch_of_edge=np.array(owner, dtype=np.int64),
    )


def is_connected(case: GridCase, dropped=()) -> bool:
    """True when the in-service branches (minus ``dropped``) connect every bus."""
    dropped = set(int(d) for d in dropped)
    keep = [k for k in case.in_service() if int(k) not in dropped]
    f = np.array([case.branches[k].from_bus for k in keep], dtype=np.int64)
    t = np.array([case.branches[k].to_bus for k in keep], dtype=np.int64)
    adj = sp.coo_matrix((np.ones(len(keep)), (f, t)), shape=(case.n_bus, case.n_bus))
    n_comp, _ = connected_components(adj, directed=False)
    return n_comp == 1
