"""FlowNet: typed input embeddings, K blocks of {GCN, virtual-node attention,
slack-gated feed-forward}, and a residual predictor over the block outputs.

A forward pass runs on a :class:`GraphBatch`, the disjoint union of one or
more sample graphs.  Pooling, attention normalisation and slack broadcasting
are all segmented per graph, so a batch of B graphs computes exactly what B
separate passes would.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import tensor_ad as ad
from .case_io import GridCase
from .network import AdmittanceMatrix, build_hetero_graph, build_ybus
from .tensor_ad import Params, Tensor
from .tensor_ad.tensor import xavier

CONFIG_SCHEMA = "flownet/1"
RAW_WIDTH = 7
EDGE_WIDTH = 5
PQ, PV, SLACK = 0, 1, 2


class MissingSlack(ValueError):
    pass


@dataclass(frozen=True)
class FlowNetConfig:
    d: int = 64
    k_blocks: int = 4
    gcn_layers_per_block: int = 2
    fusion: bool = True
    vna: bool = True
    sgf: bool = True

    def __post_init__(self):
        if self.k_blocks < 1 or self.d < 1 or self.gcn_layers_per_block < 1:
            raise ValueError("d, k_blocks and gcn_layers_per_block must be >= 1")

    @property
    def d_k(self) -> int:
        return 2 * self.d

    def to_dict(self) -> dict:
        return {"schema": CONFIG_SCHEMA, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "FlowNetConfig":
        d = dict(d)
        schema = d.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ValueError(f"model config schema {schema!r} != {CONFIG_SCHEMA!r}")
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# -- input scaling -------------------------------------------------------------
# Each raw column is mapped through asinh((x - center) / scale): linear near
# the centre (fine mismatch resolution in late loops), logarithmic for the
# large injections seen at flat start.  scale 0 means pass-through.

_COLUMNS = {
    PQ: [(0, 1.0), (0, 1.0), (1, 0.05), (0, 0.2), (0, 0.05), (0, 0.05), (0, 0.0)],
    PV: [(0, 1.0), (1, 0.05), (0, 0.2), (0, 0.05), (0, 0.0), (0, 0.0), (0, 0.0)],
    SLACK: [(1, 0.05), (0, 0.2), (0, 0.0), (0, 0.0), (0, 0.0), (0, 0.0), (0, 0.0)],
}
_CENTER = np.array([[c for c, _ in _COLUMNS[t]] for t in (PQ, PV, SLACK)], dtype=float)
_SCALE = np.array([[s for _, s in _COLUMNS[t]] for t in (PQ, PV, SLACK)], dtype=float)
_EDGE_CENTER = np.array([0.0, 0.0, 0.0, 1.0, 0.0])
_EDGE_SCALE = np.array([10.0, 10.0, 0.1, 0.05, 0.1])


def _squash(x: np.ndarray, center: np.ndarray, scale: np.ndarray) -> np.ndarray:
    safe = np.where(scale > 0, scale, 1.0)
    return np.where(scale > 0, np.arcsinh((x - center) / safe), x)


# -- graph data -------------------------------------------------------------------


@dataclass
class GraphData:
    """Everything a forward pass and the physics loss need for one scenario."""

    n: int
    node_type: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_feat: np.ndarray
    y_rows: np.ndarray
    y_cols: np.ndarray
    y_g: np.ndarray
    y_b: np.ndarray
    p_spec: np.ndarray
    q_spec: np.ndarray
    vm_set: np.ndarray
    va_set: np.ndarray
    label_vm: np.ndarray | None = None
    label_va: np.ndarray | None = None


def graph_data(case: GridCase, vm=None, va=None) -> GraphData:
    """Build :class:`GraphData` for a case; ``vm``/``va`` are optional labels."""
    g = build_hetero_graph(case)
    y = build_ybus(case)
    p, q = case.injections()
    vm_set, va_set = case.setpoints()
    return GraphData(
        n=case.n_bus,
        node_type=g.node_type(),
        src=g.src,
        dst=g.dst,
        edge_feat=g.edge_feat,
        y_rows=y.rows,
        y_cols=y.cols,
        y_g=y.g,
        y_b=y.b,
        p_spec=p,
        q_spec=q,
        vm_set=vm_set,
        va_set=va_set,
        label_vm=None if vm is None else np.asarray(vm, dtype=float),
        label_va=None if va is None else np.asarray(va, dtype=float),
    )


@dataclass
class GraphBatch:
    n: int
    n_graphs: int
    graph_id: np.ndarray
    node_type: np.ndarray
    pq: np.ndarray
    pv: np.ndarray
    slack: np.ndarray
    nonslack: np.ndarray
    slack_of_node: np.ndarray
    adj_mean: sp.csr_matrix
    edge_mean: np.ndarray
    ybus: AdmittanceMatrix
    p_spec: np.ndarray
    q_spec: np.ndarray
    vm_set: np.ndarray
    va_set: np.ndarray
    label_vm: np.ndarray | None
    label_va: np.ndarray | None
    q_present: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.q_present is None:
            self.q_present = np.ones(self.n)

    @property
    def type_segment(self) -> np.ndarray:
        return self.graph_id * 3 + self.node_type

    def init_state(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat start: PQ at 1 p.u., setpoints elsewhere, all angles at the slack angle."""
        vm = self.vm_set.copy()
        vm[self.pq] = 1.0
        va = self.va_set[self.slack_of_node].copy()
        return vm, va

    def with_q_mask(self, present: np.ndarray) -> "GraphBatch":
        out = GraphBatch(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        out.q_present = np.asarray(present, dtype=float)
        return out


def collate(items: list[GraphData]) -> GraphBatch:
    offsets = np.cumsum([0] + [g.n for g in items])
    n = int(offsets[-1])
    cat = lambda f: np.concatenate([f(g) for g in items])  # noqa: E731
    graph_id = np.concatenate([np.full(g.n, k, dtype=np.int64) for k, g in enumerate(items)])
    node_type = cat(lambda g: g.node_type)
    src = np.concatenate([g.src + o for g, o in zip(items, offsets)])
    dst = np.concatenate([g.dst + o for g, o in zip(items, offsets)])
    efeat = _squash(cat(lambda g: g.edge_feat).reshape(-1, EDGE_WIDTH), _EDGE_CENTER, _EDGE_SCALE)
    deg = np.bincount(dst, minlength=n).astype(float)
    inv = 1.0 / np.maximum(deg, 1.0)
    adj = sp.csr_matrix((inv[dst], (dst, src)), shape=(n, n))
    edge_mean = inv[:, None] * _scatter_np(efeat, dst, n)
    slack = np.flatnonzero(node_type == SLACK)
    if len(slack) != len(items):
        raise MissingSlack("every graph needs exactly one slack bus")
    ybus = AdmittanceMatrix(
        n,
        np.concatenate([g.y_rows + o for g, o in zip(items, offsets)]),
        np.concatenate([g.y_cols + o for g, o in zip(items, offsets)]),
        cat(lambda g: g.y_g),
        cat(lambda g: g.y_b),
    )
    has_labels = all(g.label_vm is not None for g in items)
    return GraphBatch(
        n=n,
        n_graphs=len(items),
        graph_id=graph_id,
        node_type=node_type,
        pq=np.flatnonzero(node_type == PQ),
        pv=np.flatnonzero(node_type == PV),
        slack=slack,
        nonslack=np.flatnonzero(node_type != SLACK),
        slack_of_node=slack[graph_id],
        adj_mean=adj,
        edge_mean=edge_mean,
        ybus=ybus,
        p_spec=cat(lambda g: g.p_spec),
        q_spec=cat(lambda g: g.q_spec),
        vm_set=cat(lambda g: g.vm_set),
        va_set=cat(lambda g: g.va_set),
        label_vm=cat(lambda g: g.label_vm) if has_labels else None,
        label_va=cat(lambda g: g.label_va) if has_labels else None,
    )


def _scatter_np(x: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    m = len(idx)
    s = sp.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(n, m))
    return np.asarray(s @ x)


# -- parameters -----------------------------------------------------------------


def init_params(cfg: FlowNetConfig, rng: np.random.Generator) -> Params:
    d, dk = cfg.d, cfg.d_k
    p = Params()

    def lin(name, fan_in, fan_out, zero=False):
        w = np.zeros((fan_in, fan_out)) if zero else xavier(rng, fan_in, fan_out)
        p.add(f"{name}.w", w)
        p.add(f"{name}.b", np.zeros(fan_out))

    def norm(name):
        p.add(f"{name}.g", np.ones(d))
        p.add(f"{name}.b", np.zeros(d))

    for t in ("pq", "pv", "slack"):
        lin(f"embed.{t}", RAW_WIDTH, d)
    for k in range(cfg.k_blocks):
        for layer in range(cfg.gcn_layers_per_block):
            pre = f"block{k}.gcn{layer}"
            p.add(f"{pre}.w_self", xavier(rng, d, d))
            p.add(f"{pre}.w_nbr", xavier(rng, d, d))
            p.add(f"{pre}.w_edge", xavier(rng, EDGE_WIDTH, d))
            p.add(f"{pre}.b", np.zeros(d))
        if cfg.vna:
            lin(f"block{k}.vna.fuse", d, d)
            # no query bias: it shifts every score in a softmax segment equally
            p.add(f"block{k}.vna.query.w", xavier(rng, d, dk))
            lin(f"block{k}.vna.out", dk, d)
            norm(f"block{k}.vna.ln")
        if cfg.sgf:
            lin(f"block{k}.sgf.value", 2 * d, d)
            lin(f"block{k}.sgf.gate", 2 * d, d)
            lin(f"block{k}.sgf.out", d, d)
            norm(f"block{k}.sgf.ln")
    width = cfg.k_blocks * d if cfg.fusion else d
    lin("head.hidden", width, d)
    lin("head.out", d, 2, zero=True)
    return p


def _lin(x: Tensor, p: Params, name: str) -> Tensor:
    return ad.linear(x, p[f"{name}.w"], p[f"{name}.b"])


def _ln(x: Tensor, p: Params, name: str) -> Tensor:
    return ad.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


# -- model pieces -------------------------------------------------------------------


@dataclass
class NodeFeatures:
    """All node rows in bus order plus the per-type index sets of the batch."""

    full: Tensor
    batch: GraphBatch

    @property
    def f_pq(self) -> Tensor:
        return ad.gather(self.full, self.batch.pq)

    @property
    def f_pv(self) -> Tensor:
        return ad.gather(self.full, self.batch.pv)

    @property
    def f_slack(self) -> Tensor:
        return ad.gather(self.full, self.batch.slack)


def node_inputs(batch: GraphBatch, vm, va, dp, dq) -> np.ndarray:
    """Scaled ``(n, 7)`` raw features for the current loop state and mismatch."""
    n = batch.n
    ref = batch.va_set[batch.slack_of_node]
    rel = va - ref
    qp = batch.q_present
    x = np.zeros((n, RAW_WIDTH))
    pq, pv, sl = batch.pq, batch.pv, batch.slack
    x[pq] = np.column_stack(
        [batch.p_spec[pq], batch.q_spec[pq] * qp[pq], vm[pq], rel[pq], dp[pq], dq[pq] * qp[pq], qp[pq]]
    )
    z = np.zeros(len(pv))
    x[pv] = np.column_stack([batch.p_spec[pv], batch.vm_set[pv], rel[pv], dp[pv], z, z, qp[pv]])
    z = np.zeros(len(sl))
    x[sl] = np.column_stack([batch.vm_set[sl], batch.va_set[sl], z, z, z, z, np.ones(len(sl))])
    t = batch.node_type
    return _squash(x, _CENTER[t], _SCALE[t])


def embed_inputs(features: np.ndarray, batch: GraphBatch, p: Params) -> NodeFeatures:
    """Type-specific linear embedding of the ``(n, 7)`` scaled inputs into width d."""
    if features.shape != (batch.n, RAW_WIDTH):
        raise ValueError(f"expected features of shape {(batch.n, RAW_WIDTH)}, got {features.shape}")
    parts, idx = [], []
    for name, rows in (("pq", batch.pq), ("pv", batch.pv), ("slack", batch.slack)):
        if len(rows):
            parts.append(_lin(Tensor(features[rows]), p, f"embed.{name}"))
            idx.append(rows)
    order = np.concatenate(idx)
    inverse = np.empty(batch.n, dtype=np.int64)
    inverse[order] = np.arange(batch.n)
    return NodeFeatures(ad.gather(ad.concat(parts, axis=0), inverse), batch)


def gcn_block(h: Tensor, batch: GraphBatch, p: Params, prefix: str, layers: int) -> Tensor:
    """Mean-aggregation graph convolution with edge-feature messages, ``layers`` deep."""
    for layer in range(layers):
        pre = f"{prefix}.gcn{layer}"
        nbr = ad.add(ad.spmm(batch.adj_mean, h), ad.matmul(Tensor(batch.edge_mean), p[f"{pre}.w_edge"]))
        z = ad.add(ad.matmul(h, p[f"{pre}.w_self"]), ad.matmul(nbr, p[f"{pre}.w_nbr"]))
        h = ad.relu(ad.add(z, p[f"{pre}.b"]))
    return h


def virtual_node_attention(h: Tensor, batch: GraphBatch, p: Params, prefix: str) -> Tensor:
    """Pool every node into a per-graph virtual node and attend it back.

    The attention weights are normalised over the nodes of each bus type in
    each graph, since there is a single key per graph.
    """
    pre = f"{prefix}.vna"
    dk = p[f"{pre}.query.w"].shape[1]
    fused = _lin(h, p, f"{pre}.fuse")
    vnode = ad.concat(
        [
            ad.segment_mean(fused, batch.graph_id, batch.n_graphs),
            ad.segment_max(fused, batch.graph_id, batch.n_graphs),
        ],
        axis=1,
    )
    v = ad.gather(vnode, batch.graph_id)
    q = ad.matmul(h, p[f"{pre}.query.w"])
    scores = ad.scale(ad.sum_(ad.mul(q, v), axis=1), 1.0 / math.sqrt(dk))
    w = ad.segment_softmax(scores, batch.type_segment, 3 * batch.n_graphs)
    attended = _lin(ad.row_scale(v, w), p, f"{pre}.out")
    return _ln(ad.add(h, attended), p, f"{pre}.ln")


def slack_gated_ff(h: Tensor, batch: GraphBatch, p: Params, prefix: str) -> Tensor:
    """Gate the graph's slack features into every PQ/PV row; slack rows pass through."""
    if len(batch.slack) != batch.n_graphs:
        raise MissingSlack("slack-gated feed-forward needs one slack row per graph")
    pre = f"{prefix}.sgf"
    ns = batch.nonslack
    own = ad.gather(h, ns)
    slack = ad.gather(h, batch.slack_of_node[ns])
    c = ad.concat([own, slack], axis=1)
    fused = ad.mul(_lin(c, p, f"{pre}.value"), ad.sigmoid(_lin(c, p, f"{pre}.gate")))
    updated = _ln(ad.add(own, _lin(fused, p, f"{pre}.out")), p, f"{pre}.ln")
    return ad.add(
        ad.scatter_add(updated, ns, batch.n),
        ad.scatter_add(ad.gather(h, batch.slack), batch.slack, batch.n),
    )


@dataclass
class Prediction:
    dvm_pq: Tensor
    dva_pq: Tensor
    dva_pv: Tensor

    def apply(self, batch: GraphBatch, vm: np.ndarray, va: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Next loop state (plain arrays, detached from the graph)."""
        vm = vm.copy()
        va = va.copy()
        vm[batch.pq] += self.dvm_pq.data
        va[batch.pq] += self.dva_pq.data
        va[batch.pv] += self.dva_pv.data
        return vm, va


def forward(
    batch: GraphBatch,
    vm: np.ndarray,
    va: np.ndarray,
    dp: np.ndarray,
    dq: np.ndarray,
    p: Params,
    cfg: FlowNetConfig,
) -> Prediction:
    feats = embed_inputs(node_inputs(batch, vm, va, dp, dq), batch, p)
    h = feats.full
    outs = []
    for k in range(cfg.k_blocks):
        pre = f"block{k}"
        h = gcn_block(h, batch, p, pre, cfg.gcn_layers_per_block)
        if cfg.vna:
            h = virtual_node_attention(h, batch, p, pre)
        if cfg.sgf:
            h = slack_gated_ff(h, batch, p, pre)
        outs.append(h)
    z = ad.concat(outs, axis=1) if cfg.fusion else outs[-1]
    out = _lin(ad.relu(_lin(z, p, "head.hidden")), p, "head.out")
    pq = ad.gather(out, batch.pq)
    pv = ad.gather(out, batch.pv)
    return Prediction(pq[:, 0], pq[:, 1], pv[:, 1])
