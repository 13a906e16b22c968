import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from migosim.data import (
    BackdoorSpec,
    Dataset,
    PartitionPlan,
    SyntheticSpec,
    backdoor_test_set,
    build_backdoor_dataset,
    concat,
    dirichlet_partition,
    gen_attacker_pool,
    gen_synthetic,
    load_csv,
    mix_counts,
    strip_class,
)
from migosim.errors import ConfigurationError, DataError
from migosim.metrics import ben_acc
from migosim.nn import ModelArch, init_model, sgd_train

SMALL = SyntheticSpec(
    class_count=4,
    feature_dim=5,
    samples_per_class=60,
    cluster_spread=0.5,
    test_per_class=20,
    out_class_present=True,
)


# ---------------------------------------------------------------- generation


def test_gen_synthetic_deterministic():
    a = gen_synthetic(SMALL, 3)
    b = gen_synthetic(SMALL, 3)
    for da, db in zip(a, b):
        assert np.array_equal(da.features, db.features)
        assert np.array_equal(da.labels, db.labels)


def test_gen_synthetic_shapes_and_balance():
    train, test, edge, out = gen_synthetic(SMALL, 1)
    assert len(train) == 4 * 60
    assert len(test) == 4 * 20
    for c in range(4):
        assert (test.labels == c).sum() == 20
    assert len(edge) == 2 * 60
    assert len(out) == 2 * 60


def test_out_pool_hygiene():
    train, test, _, out = gen_synthetic(SMALL, 2)
    out_class = SMALL.out_class
    assert np.all(out.labels == out_class)
    assert out_class not in set(train.labels.tolist())
    assert out_class not in set(test.labels.tolist())


def test_edge_pool_correctly_labeled_and_excluded_by_default():
    train, test, edge, _ = gen_synthetic(SMALL, 5)
    assert np.all(edge.labels == SMALL.edge_parent_class)
    # no trickle: none of the edge rows appear in benign data
    train_rows = {tuple(r) for r in train.features}
    assert not any(tuple(r) in train_rows for r in edge.features)


def test_edge_trickle_adds_exactly_the_configured_share():
    spec = SyntheticSpec(
        class_count=4, feature_dim=5, samples_per_class=60,
        cluster_spread=0.5, test_per_class=20, edge_subpop_fraction=0.1,
    )
    train, _, edge, _ = gen_synthetic(spec, 7)
    expected = int(0.1 * len(edge))
    assert len(train) == 4 * 60 + expected
    train_rows = {tuple(r) for r in train.features}
    leaked = sum(tuple(r) in train_rows for r in edge.features)
    assert leaked == expected


def test_class_means_respect_separation():
    train, _, _, _ = gen_synthetic(SMALL, 9)
    means = np.stack([
        train.features[train.labels == c].mean(axis=0) for c in range(4)
    ])
    for i in range(4):
        for j in range(i + 1, 4):
            # empirical means sit close to the true means, which are >= 6 spreads apart
            assert np.linalg.norm(means[i] - means[j]) > 4 * SMALL.cluster_spread


def test_gen_synthetic_rejects_bad_spread():
    with pytest.raises(ConfigurationError):
        SyntheticSpec(cluster_spread=0.0)


def test_centralized_training_oracle_reaches_95_percent():
    spec = SyntheticSpec(class_count=10, feature_dim=8, samples_per_class=100,
                         cluster_spread=0.6, test_per_class=30, class_separation=6.0)
    train, test, _, _ = gen_synthetic(spec, 0)
    arch = ModelArch((8, 32, 10))
    model = sgd_train(init_model(arch, 0), arch, train,
                      epochs=20, lr=0.05, batch_size=32, seed=0)
    assert ben_acc(model, arch, test) >= 95.0


def test_attacker_pool_same_generators():
    train, _, _, _ = gen_synthetic(SMALL, 4)
    pool = gen_attacker_pool(SMALL, 4, pool_seed=1, per_class=50)
    assert len(pool) == 4 * 50
    for c in range(4):
        own = pool.features[pool.labels == c].mean(axis=0)
        ref = train.features[train.labels == c].mean(axis=0)
        assert np.linalg.norm(own - ref) < 2 * SMALL.cluster_spread


# ---------------------------------------------------------------- partitioning


def test_partition_exact_cover():
    train, _, _, _ = gen_synthetic(SMALL, 1)
    plan = dirichlet_partition(train, 12, 0.9, seed=0)
    flat = np.concatenate(plan.assignments)
    assert np.array_equal(np.sort(flat), np.arange(len(train)))
    assert all(len(a) >= 1 for a in plan.assignments)


def test_partition_rejects_too_many_clients():
    train = Dataset(np.zeros((5, 2)), np.zeros(5, dtype=int), 2, 2)
    with pytest.raises(ConfigurationError):
        dirichlet_partition(train, 6, 0.9, seed=0)


def test_partition_plan_validates():
    with pytest.raises(DataError):
        PartitionPlan((np.array([0, 1]), np.array([1, 2])), 4)


def test_dirichlet_high_alpha_near_uniform():
    # alpha = 1000, N = 10: every client's per-class share within +-50% of 1/10
    train, _, _, _ = gen_synthetic(
        SyntheticSpec(class_count=4, feature_dim=3, samples_per_class=200,
                      cluster_spread=0.5, test_per_class=5), 0)
    hits = 0
    for seed in range(100):
        plan = dirichlet_partition(train, 10, 1000.0, seed=seed)
        ok = True
        for a in plan.assignments:
            labels = train.labels[a]
            for c in range(4):
                share = (labels == c).sum() / 200
                if not 0.05 <= share <= 0.15:
                    ok = False
        hits += ok
    assert hits >= 99


def test_dirichlet_low_alpha_concentrates():
    # alpha = 0.01: some client is dominated by a single class
    train, _, _, _ = gen_synthetic(
        SyntheticSpec(class_count=4, feature_dim=3, samples_per_class=200,
                      cluster_spread=0.5, test_per_class=5), 0)
    hits = 0
    for seed in range(100):
        plan = dirichlet_partition(train, 10, 0.01, seed=seed)
        found = False
        for a in plan.assignments:
            labels = train.labels[a]
            counts = np.bincount(labels, minlength=4)
            if counts.max() / len(a) > 0.8:
                found = True
        hits += found
    assert hits >= 99


# ---------------------------------------------------------------- backdoor datasets


def pools(seed=0):
    train, test, edge, out = gen_synthetic(SMALL, seed)
    attacker = gen_attacker_pool(SMALL, seed, per_class=200)
    return attacker, edge, out


def test_mix_counts_paper_default():
    spec = BackdoorSpec(kind="edge", backdoor_label=3, true_label=0,
                        dataset_size=512, malicious_fraction=0.4)
    assert mix_counts(spec) == (308, 204)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 600), st.floats(0.01, 0.99))
def test_mix_counts_ceiling_rule(size, fraction):
    spec = BackdoorSpec(kind="edge", backdoor_label=3, true_label=0,
                        dataset_size=size, malicious_fraction=fraction)
    benign, malicious = mix_counts(spec)
    assert benign == math.ceil((1.0 - fraction) * size)
    assert benign + malicious == size


def test_build_in_backdoor_contents():
    attacker, edge, out = pools()
    spec = BackdoorSpec(kind="in", backdoor_label=3, target_class=1,
                        dataset_size=100, malicious_fraction=0.4)
    db = build_backdoor_dataset(attacker, edge, out, spec, seed=5)
    assert len(db) == 100
    benign_n, mal_n = mix_counts(spec)
    malicious = db.subset(range(benign_n, 100))
    assert np.all(malicious.labels == 3)
    # malicious features must come from the target-class generator
    target_rows = {tuple(r) for r in attacker.features[attacker.labels == 1]}
    assert all(tuple(r) in target_rows for r in malicious.features)


def test_build_out_backdoor_contents():
    attacker, edge, out = pools()
    spec = BackdoorSpec(kind="out", backdoor_label=0, out_class=SMALL.out_class,
                        dataset_size=80, malicious_fraction=0.5)
    db = build_backdoor_dataset(attacker, edge, out, spec, seed=6)
    benign_n, mal_n = mix_counts(spec)
    malicious = db.subset(range(benign_n, 80))
    assert np.all(malicious.labels == 0)
    out_rows = {tuple(r) for r in out.features}
    benign_rows = {tuple(r) for r in attacker.features}
    assert all(tuple(r) in out_rows for r in malicious.features)
    assert not any(tuple(r) in benign_rows for r in malicious.features)


def test_build_backdoor_insufficient_pool_errors():
    attacker, edge, out = pools()
    spec = BackdoorSpec(kind="in", backdoor_label=3, target_class=1,
                        dataset_size=2000, malicious_fraction=0.4)
    with pytest.raises(DataError):
        build_backdoor_dataset(attacker, edge, out, spec, seed=0)


def test_backdoor_test_set_disjoint_from_training():
    attacker, edge, out = pools()
    spec = BackdoorSpec(kind="edge", backdoor_label=3, true_label=0,
                        dataset_size=100, malicious_fraction=0.4)
    db = build_backdoor_dataset(attacker, edge, out, spec, seed=9)
    bt = backdoor_test_set(attacker, edge, out, spec, size=50, seed=9)
    assert len(bt) == 50
    assert np.all(bt.labels == 3)
    train_rows = {tuple(r) for r in db.features}
    assert not any(tuple(r) in train_rows for r in bt.features)


def test_backdoor_test_set_insufficient_errors():
    attacker, edge, out = pools()
    spec = BackdoorSpec(kind="edge", backdoor_label=3, true_label=0,
                        dataset_size=100, malicious_fraction=0.4)
    with pytest.raises(DataError):
        backdoor_test_set(attacker, edge, out, spec, size=len(edge), seed=9)


def test_backdoor_spec_validation():
    with pytest.raises(ConfigurationError):
        BackdoorSpec(kind="in", backdoor_label=1, target_class=1)
    with pytest.raises(ConfigurationError):
        BackdoorSpec(kind="edge", backdoor_label=2, true_label=2)
    with pytest.raises(ConfigurationError):
        BackdoorSpec(kind="out", backdoor_label=1)
    with pytest.raises(ConfigurationError):
        BackdoorSpec(kind="nope", backdoor_label=1)


def test_out_spec_rejects_benign_out_class():
    attacker, edge, out = pools()
    spec = BackdoorSpec(kind="out", backdoor_label=0, out_class=2,
                        dataset_size=20, malicious_fraction=0.5)
    with pytest.raises(ConfigurationError):
        build_backdoor_dataset(attacker, edge, out, spec, seed=0)


# ---------------------------------------------------------------- strip / csv


def test_strip_class():
    ds = Dataset(np.arange(10).reshape(5, 2), np.array([0, 1, 0, 2, 1]), 3, 2)
    out = strip_class(ds, 1)
    assert len(out) == 3
    assert np.array_equal(out.labels, [0, 0, 2])
    assert np.array_equal(out.features[1], [4, 5])  # order preserved
    assert len(strip_class(ds, 7)) == 5  # absent class: unchanged


def test_csv_round_trip(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("f0,f1,label\n0.5,1.5,0\n-1.0,2.0,2\n")
    ds = load_csv(path)
    assert ds.feature_dim == 2
    assert ds.class_count == 3
    assert np.allclose(ds.features, [[0.5, 1.5], [-1.0, 2.0]])
    assert np.array_equal(ds.labels, [0, 2])


def test_csv_rejects_bad_header_and_rows(tmp_path):
    bad_header = tmp_path / "a.csv"
    bad_header.write_text("x,y,label\n1,2,0\n")
    with pytest.raises(DataError):
        load_csv(bad_header)
    bad_row = tmp_path / "b.csv"
    bad_row.write_text("f0,label\n1.0,zebra\n")
    with pytest.raises(DataError):
        load_csv(bad_row)
    negative = tmp_path / "c.csv"
    negative.write_text("f0,label\n1.0,-1\n")
    with pytest.raises(DataError):
        load_csv(negative)


def test_concat_checks_compatibility():
    a = Dataset(np.zeros((2, 3)), np.zeros(2, dtype=int), 2, 3)
    b = Dataset(np.zeros((2, 4)), np.zeros(2, dtype=int), 2, 4)
    with pytest.raises(Exception):
        concat(a, b)
