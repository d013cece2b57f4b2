from dataclasses import replace

import numpy as np
import pytest

from gridflow import tensor_ad as ad
from gridflow.case_io import Branch, Bus, BusType, Generator, GridCase
from gridflow.flownet import (
    RAW_WIDTH,
    FlowNetConfig,
    GraphData,
    MissingSlack,
    collate,
    embed_inputs,
    forward,
    gcn_block,
    graph_data,
    init_params,
    node_inputs,
    slack_gated_ff,
    virtual_node_attention,
)
from gridflow.seiter import loop_inputs, predicted_state
from gridflow.tensor_ad import Tensor, gradcheck

D = 6


def toy_case(load=0.3):
    """Slack - PV - PQ - PQ path with one chord, small enough for gradchecks."""
    buses = (
        Bus(0, BusType.SLACK, 0.0, 0.0, 0.0, 0.0, 1.02, 0.05, 1.0),
        Bus(1, BusType.PV, 0.1, 0.0, 0.0, 0.0, 1.01, 0.0, 1.0),
        Bus(2, BusType.PQ, load, 0.1, 0.0, 0.0, 1.0, 0.0, 1.0),
        Bus(3, BusType.PQ, 0.2, 0.05, 0.0, 0.02, 1.0, 0.0, 1.0),
    )
    branches = (
        Branch(0, 1, 0.01, 0.1, 0.02),
        Branch(1, 2, 0.02, 0.15, 0.01, tap=1.02),
        Branch(2, 3, 0.01, 0.08, 0.0),
        Branch(0, 3, 0.03, 0.2, 0.01),
    )
    gens = (Generator(0, 0.0, 0.0, 1.02), Generator(1, 0.4, 0.0, 1.01))
    return GridCase("toy", 100.0, buses, branches, gens)


def toy_batch(case=None):
    return collate([graph_data(case or toy_case())])


def params(cfg, seed=0, live_head=False):
    p = init_params(cfg, np.random.default_rng(seed))
    if live_head:
        p["head.out.w"].data[:] = np.random.default_rng(seed + 1).standard_normal(p["head.out.w"].shape) * 0.1
    return p


def features(batch, seed=0):
    return np.random.default_rng(seed).standard_normal((batch.n, RAW_WIDTH))


def test_config_round_trip_and_validation():
    cfg = FlowNetConfig(d=32, k_blocks=2, vna=False)
    assert FlowNetConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.d_k == 64
    with pytest.raises(ValueError):
        FlowNetConfig(k_blocks=0)


def test_zero_inputs_embed_to_bias():
    b = toy_batch()
    p = params(FlowNetConfig(d=D))
    for t in ("pq", "pv", "slack"):
        p[f"embed.{t}.b"].data[:] = np.arange(D) + {"pq": 0, "pv": 10, "slack": 20}[t]
    f = embed_inputs(np.zeros((b.n, RAW_WIDTH)), b, p)
    np.testing.assert_array_equal(f.f_pq.data, np.tile(np.arange(D), (2, 1)))
    np.testing.assert_array_equal(f.f_pv.data, [np.arange(D) + 10])
    np.testing.assert_array_equal(f.f_slack.data, [np.arange(D) + 20])


def test_case39_group_sizes(case39):
    b = collate([graph_data(case39)])
    f = embed_inputs(features(b), b, params(FlowNetConfig(d=D)))
    assert f.f_pq.shape == (29, D) and f.f_pv.shape == (9, D) and f.f_slack.shape == (1, D)


def test_embed_rejects_bad_width():
    b = toy_batch()
    with pytest.raises(ValueError):
        embed_inputs(np.zeros((b.n, 5)), b, params(FlowNetConfig(d=D)))


def test_q_mask_changes_only_pq_embeddings():
    b = toy_batch()
    vm, va = b.init_state()
    dp, dq = loop_inputs(b, vm, va)
    p = params(FlowNetConfig(d=D))
    full = embed_inputs(node_inputs(b, vm, va, dp, dq), b, p).full.data
    masked_b = b.with_q_mask(np.array([1.0, 1.0, 0.0, 1.0]))
    x = node_inputs(masked_b, vm, va, dp, dq)
    assert x[2, 1] == 0.0 and x[2, 5] == 0.0 and x[2, 6] == 0.0
    masked = embed_inputs(x, masked_b, p).full.data
    changed = np.flatnonzero(np.abs(full - masked).max(axis=1) > 0)
    np.testing.assert_array_equal(changed, [2])


def test_gcn_without_edges_is_self_map():
    case = toy_case()
    lone = [GraphData(**{**graph_data(case).__dict__, "src": np.zeros(0, int), "dst": np.zeros(0, int),
                         "edge_feat": np.zeros((0, 5))})]
    b = collate(lone)
    p = params(FlowNetConfig(d=D, gcn_layers_per_block=1))
    h = np.random.default_rng(0).standard_normal((4, D))
    out = gcn_block(Tensor(h), b, p, "block0", 1)
    np.testing.assert_allclose(out.data, np.maximum(h @ p["block0.gcn0.w_self"].data, 0.0))


def test_gcn_locality_across_components():
    b = collate([graph_data(toy_case()), graph_data(toy_case(0.5))])
    p = params(FlowNetConfig(d=D))
    h = np.random.default_rng(0).standard_normal((8, D))
    base = gcn_block(Tensor(h), b, p, "block0", 2).data
    h2 = h.copy()
    h2[4:] += 1.0
    moved = gcn_block(Tensor(h2), b, p, "block0", 2).data
    np.testing.assert_array_equal(base[:4], moved[:4])
    assert np.abs(base[4:] - moved[4:]).max() > 0


def test_gcn_star_symmetry():
    hub = Bus(0, BusType.SLACK, 0, 0, 0, 0, 1.0, 0.0, 1.0)
    leaves = tuple(Bus(i, BusType.PQ, 0.1, 0.0, 0, 0, 1.0, 0.0, 1.0) for i in (1, 2, 3))
    star = GridCase("star", 100.0, (hub,) + leaves, tuple(Branch(0, i, 0.01, 0.1, 0.0) for i in (1, 2, 3)))
    b = collate([graph_data(star)])
    p = params(FlowNetConfig(d=D))
    h = np.random.default_rng(0).standard_normal((1, D))
    h = np.vstack([h, np.tile(np.random.default_rng(1).standard_normal(D), (3, 1))])
    out = gcn_block(Tensor(h), b, p, "block0", 2).data
    np.testing.assert_allclose(out[1], out[2], atol=1e-14)
    np.testing.assert_allclose(out[1], out[3], atol=1e-14)


def _slack_only():
    g = GraphData(
        n=1, node_type=np.array([2]), src=np.zeros(0, int), dst=np.zeros(0, int), edge_feat=np.zeros((0, 5)),
        y_rows=np.zeros(0, int), y_cols=np.zeros(0, int), y_g=np.zeros(0), y_b=np.zeros(0),
        p_spec=np.zeros(1), q_spec=np.zeros(1), vm_set=np.ones(1), va_set=np.zeros(1),
    )
    return collate([g])


def test_vna_single_node_is_layernorm_of_projection():
    b = _slack_only()
    p = params(FlowNetConfig(d=D))
    h = np.random.default_rng(0).standard_normal((1, D))
    out = virtual_node_attention(Tensor(h), b, p, "block0").data
    fused = h @ p["block0.vna.fuse.w"].data + p["block0.vna.fuse.b"].data
    v = np.concatenate([fused, fused], axis=1)  # mean and max of one row coincide
    z = h + v @ p["block0.vna.out.w"].data + p["block0.vna.out.b"].data
    zc = z - z.mean()
    np.testing.assert_allclose(out, zc / np.sqrt((zc**2).mean() + 1e-5), atol=1e-12)


def test_vna_permutation_equivariance(case39):
    b = collate([graph_data(case39)])
    p = params(FlowNetConfig(d=D))
    h = np.random.default_rng(0).standard_normal((b.n, D))
    perm = np.arange(b.n)
    perm[b.pq] = np.random.default_rng(1).permutation(b.pq)
    out = virtual_node_attention(Tensor(h), b, p, "block0").data
    out_p = virtual_node_attention(Tensor(h[perm]), b, p, "block0").data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_vna_global_sensitivity():
    b = toy_batch()
    p = params(FlowNetConfig(d=D))
    h = np.random.default_rng(0).standard_normal((4, D))
    out = virtual_node_attention(Tensor(h), b, p, "block0").data
    h2 = h.copy()
    h2[0] *= 2.0
    out2 = virtual_node_attention(Tensor(h2), b, p, "block0").data
    # node 2 is two hops from node 0, yet its output moves
    assert np.abs(out2[2] - out[2]).max() > 1e-6
    assert (np.abs(out2 - out).max(axis=1) > 1e-6).all()


def test_sgf_closed_gate_is_plain_layernorm():
    b = toy_batch()
    p = params(FlowNetConfig(d=D))
    p["block0.sgf.gate.b"].data[:] = -1e4
    h = np.random.default_rng(0).standard_normal((4, D))
    out = slack_gated_ff(Tensor(h), b, p, "block0").data
    own = h[b.nonslack] + p["block0.sgf.out.b"].data
    oc = own - own.mean(axis=1, keepdims=True)
    np.testing.assert_allclose(out[b.nonslack], oc / np.sqrt((oc**2).mean(axis=1, keepdims=True) + 1e-5), atol=1e-10)
    np.testing.assert_array_equal(out[b.slack], h[b.slack])


def test_sgf_rowwise_and_slack_influence():
    b = toy_batch()
    p = params(FlowNetConfig(d=D))
    h = np.random.default_rng(0).standard_normal((4, D))
    h[3] = h[2]
    out = slack_gated_ff(Tensor(h), b, p, "block0").data
    np.testing.assert_allclose(out[2], out[3], atol=1e-15)
    h2 = h.copy()
    h2[b.slack] += 0.5
    out2 = slack_gated_ff(Tensor(h2), b, p, "block0").data
    moved = np.abs(out2 - out).max(axis=1)
    assert (moved[b.nonslack] > 1e-8).all()
    np.testing.assert_array_equal(out2[b.slack], h2[b.slack])


def test_sgf_requires_slack_rows():
    b = toy_batch()
    b.slack = b.slack[:0]
    with pytest.raises(MissingSlack):
        slack_gated_ff(Tensor(np.zeros((4, D))), b, params(FlowNetConfig(d=D)), "block0")


def _run(b, p, cfg, vm=None, va=None):
    if vm is None:
        vm, va = b.init_state()
    dp, dq = loop_inputs(b, vm, va)
    return forward(b, vm, va, dp, dq, p, cfg)


def test_residual_identity_at_init(case39):
    b = collate([graph_data(case39)])
    cfg = FlowNetConfig(d=D)
    pred = _run(b, params(cfg), cfg)
    assert pred.dvm_pq.shape == (29,) and pred.dva_pq.shape == (29,) and pred.dva_pv.shape == (9,)
    vm, va = b.init_state()
    vm2, va2 = pred.apply(b, vm, va)
    assert vm2.tobytes() == vm.tobytes() and va2.tobytes() == va.tobytes()


@pytest.mark.parametrize("flags", [{}, {"fusion": False}, {"vna": False}, {"sgf": False},
                                   {"fusion": False, "vna": False, "sgf": False}])
def test_every_parameter_receives_gradient(case39, flags):
    cfg = FlowNetConfig(d=D, **flags)
    b = collate([graph_data(case39)])
    p = params(cfg, live_head=True)
    pred = _run(b, p, cfg)
    ad.sum_(ad.add(ad.sum_(pred.dva_pq), ad.sum_(ad.mul(pred.dvm_pq, pred.dvm_pq)))).backward()
    dead = [k for k, g in p.grads().items() if g is None or not np.any(g)]
    assert dead == []


def test_slack_embedding_reaches_pq_angles(case39):
    cfg = FlowNetConfig(d=D, vna=False)
    b = collate([graph_data(case39)])
    p = params(cfg, live_head=True)
    ad.sum_(_run(b, p, cfg).dva_pq).backward()
    assert np.linalg.norm(p["embed.slack.w"].grad) > 0


def test_batched_equals_separate(case39, small_dataset):
    cfg = FlowNetConfig(d=D)
    p = params(cfg, live_head=True)
    items = [graph_data(s.to_case(case39)) for s in small_dataset.train[:3]]
    joint = _run(collate(items), p, cfg)
    off_pq = 0
    for it in items:
        alone = _run(collate([it]), p, cfg)
        n_pq = len(alone.dva_pq.data)
        np.testing.assert_allclose(joint.dva_pq.data[off_pq:off_pq + n_pq], alone.dva_pq.data, atol=1e-12)
        off_pq += n_pq


def _relabel(case, perm):
    """Same grid with bus ``perm[k]`` moved to position ``k``."""
    where = {old: new for new, old in enumerate(perm)}
    buses = tuple(replace(case.buses[old], id=new) for new, old in enumerate(perm))
    branches = tuple(replace(br, from_bus=where[br.from_bus], to_bus=where[br.to_bus]) for br in case.branches)
    gens = tuple(replace(g, bus=where[g.bus]) for g in case.generators)
    ext = tuple(case.external_ids[old] for old in perm)
    return GridCase(case.name, case.base_mva, buses, branches, gens, ext)


def test_forward_permutation_equivariance(case39):
    cfg = FlowNetConfig(d=D)
    p = params(cfg, live_head=True)
    perm = np.random.default_rng(5).permutation(39)
    a = collate([graph_data(case39)])
    b = collate([graph_data(_relabel(case39, perm))])
    vm_a, va_a = _run(a, p, cfg).apply(a, *a.init_state())
    vm_b, va_b = _run(b, p, cfg).apply(b, *b.init_state())
    np.testing.assert_allclose(vm_b, vm_a[perm], atol=1e-12)
    np.testing.assert_allclose(va_b, va_a[perm], atol=1e-12)


def test_composed_block_gradcheck():
    cfg = FlowNetConfig(d=4, k_blocks=1)
    b = toy_batch()
    p = params(cfg, seed=3)
    names = [k for k in p.names() if k.startswith("block0.")]
    h0 = np.random.default_rng(4).standard_normal((4, 4))
    w = np.random.default_rng(5).standard_normal((4, 4))

    def block(h, *leaves):
        q = p.copy()
        for k, leaf in zip(names, leaves):
            q._t[k] = leaf
        z = gcn_block(h, b, q, "block0", cfg.gcn_layers_per_block)
        z = virtual_node_attention(z, b, q, "block0")
        z = slack_gated_ff(z, b, q, "block0")
        return ad.sum_(ad.reshape(ad.mul(z, Tensor(w)), (-1,)))

    assert gradcheck(block, [h0] + [p[k].data.copy() for k in names]) < 1e-3


def test_predicted_state_gradcheck():
    # gradient of the physics-facing state assembly w.r.t. the raw head output
    b = toy_batch()
    vm, va = b.init_state()

    def f(dvm, dva_pq, dva_pv):
        from gridflow.flownet import Prediction

        vm_t, va_t = predicted_state(Prediction(dvm, dva_pq, dva_pv), b, vm, va)
        return ad.sum_(ad.add(ad.mul(vm_t, vm_t), ad.sin(va_t)))

    r = np.random.default_rng(0)
    assert gradcheck(f, [r.standard_normal(2), r.standard_normal(2), r.standard_normal(1)]) < 1e-4
