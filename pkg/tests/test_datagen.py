from dataclasses import replace

import numpy as np
import pytest

from gridflow.case_io import BusType
from gridflow.datagen import (
    ExcessiveDivergence,
    ExhaustedResampling,
    PerturbConfig,
    Sample,
    dataset_fingerprint,
    generate,
    label_mismatch,
    perturb,
    read_dataset,
    split_by_topology,
    topology_overlap,
    write_dataset,
)
from gridflow.network import is_connected


def test_degenerate_noise_is_identity(case39, rng):
    cfg = PerturbConfig(load_range=(1.0, 1.0), branch_range=(1.0, 1.0), drop_counts=(0,))
    case, drop = perturb(case39, rng, cfg)
    assert drop == ()
    assert case == case39


def test_mean_load_multiplier(case39):
    rng = np.random.default_rng(0)
    cfg = PerturbConfig(drop_counts=(0,))
    pq = case39.pq
    loaded = [i for i in pq if case39.buses[i].p_load != 0]
    base = np.array([case39.buses[i].p_load for i in loaded])
    ratios = []
    for _ in range(10_000):
        case, _ = perturb(case39, rng, cfg)
        ratios.append(np.array([case.buses[i].p_load for i in loaded]) / base)
    assert 0.99 <= np.mean(ratios) <= 1.01


def test_only_pq_loads_are_scaled(case39, rng):
    case, _ = perturb(case39, rng)
    for a, b in zip(case39.buses, case.buses):
        if a.bus_type is not BusType.PQ:
            assert (a.p_load, a.q_load) == (b.p_load, b.q_load)


def test_drops_keep_network_connected(case39):
    for k in range(300):
        case, drop = perturb(case39, np.random.default_rng(k))
        assert len(drop) in (1, 2) and len(set(drop)) == len(drop)
        assert is_connected(case)


def test_disconnecting_drop_is_resampled(case39):
    # restrict the candidates so the only cut isolating bus 9 is never emitted
    ext = {e: i for i, e in enumerate(case39.external_ids)}
    cut = tuple(k for k, br in enumerate(case39.branches) if ext[9] in (br.from_bus, br.to_bus))
    seen = set()
    for k in range(2000):
        _, drop = perturb(case39, np.random.default_rng(k))
        seen.add(drop)
    assert cut not in seen


def test_exhausted_resampling(two_bus, rng):
    with pytest.raises(ExhaustedResampling):
        perturb(two_bus, rng, PerturbConfig(drop_counts=(1,), max_resample=5))


def test_generate_labels_are_exact(case39, small_dataset):
    ds = small_dataset
    assert len(ds.train) + len(ds.test) == 100
    assert max(label_mismatch(case39, s) for s in ds.train + ds.test) < 1e-8


def test_topology_disjoint_split(small_dataset):
    assert topology_overlap(small_dataset.manifest) == set()
    train = {s.dropped_lines for s in small_dataset.train}
    test = {s.dropped_lines for s in small_dataset.test}
    assert not train & test
    assert 0.1 <= len(small_dataset.test) / 100 <= 0.35


def test_split_assigns_whole_topologies():
    samples = [
        Sample(i, (i % 7,), *[np.zeros(1)] * 5, np.ones(1), np.zeros(1)) for i in range(70)
    ]
    train, test = split_by_topology(samples, seed=3, test_fraction=0.2)
    assert len(test) == 20 and len(train) == 50
    assert not {s.dropped_lines for s in train} & {s.dropped_lines for s in test}


def test_determinism_byte_identical(case39, tmp_path):
    a = write_dataset(generate(case39, 30, seed=5), tmp_path / "a").parent
    b = write_dataset(generate(case39, 30, seed=5), tmp_path / "b").parent
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_seed_changes_output(case39):
    a = generate(case39, 20, seed=1)
    b = generate(case39, 20, seed=2)
    assert dataset_fingerprint(a) != dataset_fingerprint(b)


def test_shard_round_trip(case39, tmp_path):
    ds = generate(case39, 25, seed=11)
    write_dataset(ds, tmp_path, shard_size=8)
    back = read_dataset(tmp_path)
    assert dataset_fingerprint(back) == dataset_fingerprint(ds)
    assert back.manifest["schema"] == "dataset/1"
    assert len([p for p in tmp_path.iterdir() if p.name.startswith("train-")]) >= 2


def test_tampered_shard_detected(case39, tmp_path):
    write_dataset(generate(case39, 12, seed=0), tmp_path)
    shard = tmp_path / "train-00000.jsonl"
    shard.write_text(shard.read_text().replace("1", "2", 1))
    with pytest.raises(ValueError, match="hash"):
        read_dataset(tmp_path)


def test_sample_reconstructs_case(case39, small_dataset):
    s = small_dataset.train[0]
    case = s.to_case(case39)
    assert sorted(set(range(46)) - set(case.in_service().tolist())) == list(s.dropped_lines)
    assert Sample.from_dict(s.to_dict()).to_dict() == s.to_dict()


def test_excessive_divergence(two_bus):
    heavy = two_bus.with_buses([two_bus.buses[0], replace(two_bus.buses[1], p_load=100.0)])
    cfg = PerturbConfig(drop_counts=(0,))
    with pytest.raises(ExcessiveDivergence):
        generate(heavy, 10, seed=0, cfg=cfg)


def test_n_below_minimum(case39):
    with pytest.raises(ValueError):
        generate(case39, 5, seed=0)
