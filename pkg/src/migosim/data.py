"""Synthetic classification data, non-i.i.d. partitioning, and poisoned datasets.

The synthetic task is a mixture of well-separated isotropic Gaussians, one
per class, plus two special pools: an "edge" sub-cluster of one class that
benign clients (almost) never see, and an out-of-distribution class that is
reserved one extra label index and never appears in benign data.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DataError, ShapeError
from .seeds import derive_rng

# The edge cluster is displaced this many spreads from its parent class mean.
EDGE_OFFSET = 4.0
# Edge/out pools are generated larger than one class worth of samples so the
# attacker can carve disjoint train and test instances out of them.
POOL_FACTOR = 2


@dataclass
class Dataset:
    """Feature rows with integer labels drawn from [0, class_count)."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    feature_dim: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(
            -1, self.feature_dim
        )
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.features.shape[0]} rows vs {self.labels.shape[0]} labels"
            )
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.class_count
        ):
            raise DataError(
                f"labels must lie in [0, {self.class_count}), got "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return self.labels.size

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.features[idx], self.labels[idx], self.class_count, self.feature_dim
        )

    def class_indices(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)


def concat(a: Dataset, b: Dataset) -> Dataset:
    if a.feature_dim != b.feature_dim or a.class_count != b.class_count:
        raise ShapeError("datasets disagree on feature_dim or class_count")
    return Dataset(
        np.concatenate([a.features, b.features]),
        np.concatenate([a.labels, b.labels]),
        a.class_count,
        a.feature_dim,
    )


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape of the synthetic task.

    `edge_subpop_fraction` is the share of the edge pool that leaks into the
    benign training data; 0 means benign clients never see the subpopulation.
    """

    class_count: int = 10
    feature_dim: int = 8
    samples_per_class: int = 200
    cluster_spread: float = 0.6
    edge_subpop_fraction: float = 0.0
    out_class_present: bool = False
    test_per_class: int = 50
    edge_parent_class: int = 0
    class_separation: float = 5.0  # minimum mean distance, in spreads

    def __post_init__(self):
        if self.class_count < 2:
            raise ConfigurationError(f"need >= 2 classes, got {self.class_count}")
        if self.feature_dim < 1 or self.samples_per_class < 1 or self.test_per_class < 1:
            raise ConfigurationError("dims and sample counts must be >= 1")
        if self.cluster_spread <= 0:
            raise ConfigurationError(
                f"cluster spread must be positive, got {self.cluster_spread}"
            )
        if not 0.0 <= self.edge_subpop_fraction <= 1.0:
            raise ConfigurationError("edge_subpop_fraction must be in [0, 1]")
        if not 0 <= self.edge_parent_class < self.class_count:
            raise ConfigurationError("edge_parent_class out of range")
        if self.class_separation <= EDGE_OFFSET:
            raise ConfigurationError(
                f"class_separation must exceed the edge offset ({EDGE_OFFSET}) so "
                "the edge sub-cluster stays closest to its parent class"
            )

    @property
    def label_space(self) -> int:
        """Label count including the reserved out-of-distribution index."""
        return self.class_count + (1 if self.out_class_present else 0)

    @property
    def out_class(self) -> int:
        return self.class_count


def _place_means(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Means for every label (benign classes, then the out class if present),
    pairwise separated by at least class_separation * spread."""
    sep = spec.class_separation * spec.cluster_spread
    count = spec.label_space
    half = sep
    while True:
        means: list[np.ndarray] = []
        ok = True
        for _ in range(count):
            placed = False
            for _ in range(200):
                cand = rng.uniform(-half, half, spec.feature_dim)
                if all(np.linalg.norm(cand - m) >= sep for m in means):
                    means.append(cand)
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            return np.stack(means)
        half *= 1.4  # box too tight for this dimension/count, widen and retry


def _edge_mean(
    spec: SyntheticSpec, means: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Edge sub-cluster mean: parent mean displaced EDGE_OFFSET spreads away,
    in a direction that keeps it clear of the other class means."""
    sep = spec.class_separation * spec.cluster_spread
    parent = means[spec.edge_parent_class]
    others = [m for i, m in enumerate(means) if i != spec.edge_parent_class]
    best, best_clearance = None, -np.inf
    for _ in range(100):
        u = rng.normal(size=spec.feature_dim)
        u /= np.linalg.norm(u)
        cand = parent + EDGE_OFFSET * spec.cluster_spread * u
        clearance = min(np.linalg.norm(cand - m) for m in others) if others else np.inf
        if clearance >= sep:
            return cand
        if clearance > best_clearance:
            best, best_clearance = cand, clearance
    return best


def _sample_cluster(mean, spread, n, dim, rng) -> np.ndarray:
    return rng.normal(loc=mean, scale=spread, size=(n, dim))


def gen_synthetic(
    spec: SyntheticSpec, seed: int
) -> tuple[Dataset, Dataset, Dataset, Dataset]:
    """Generate (train, test, edge_pool, out_pool) for one task seed.

    The test set is class-balanced over the benign classes. The edge pool is
    correctly labeled with its parent class but excluded from benign data
    except for the configured trickle. The out pool carries the reserved
    extra label and never appears in benign train or test data.
    """
    ss = np.random.SeedSequence(int(seed))
    r_means, r_train, r_test, r_edge, r_out = (
        np.random.default_rng(c) for c in ss.spawn(5)
    )
    means = _place_means(spec, r_means)
    edge_mean = _edge_mean(spec, means, r_means)
    d, spread = spec.feature_dim, spec.cluster_spread
    space = spec.label_space

    train_feat, train_lab = [], []
    test_feat, test_lab = [], []
    for c in range(spec.class_count):
        train_feat.append(_sample_cluster(means[c], spread, spec.samples_per_class, d, r_train))
        train_lab.append(np.full(spec.samples_per_class, c))
        test_feat.append(_sample_cluster(means[c], spread, spec.test_per_class, d, r_test))
        test_lab.append(np.full(spec.test_per_class, c))

    pool_n = POOL_FACTOR * spec.samples_per_class
    edge_pool = Dataset(
        _sample_cluster(edge_mean, spread, pool_n, d, r_edge),
        np.full(pool_n, spec.edge_parent_class),
        space,
        d,
    )
    if spec.out_class_present:
        out_pool = Dataset(
            _sample_cluster(means[spec.out_class], spread, pool_n, d, r_out),
            np.full(pool_n, spec.out_class),
            space,
            d,
        )
    else:
        out_pool = Dataset(np.zeros((0, d)), np.zeros(0, dtype=np.int64), space, d)

    trickle = int(spec.edge_subpop_fraction * len(edge_pool))
    if trickle:
        train_feat.append(edge_pool.features[:trickle])
        train_lab.append(edge_pool.labels[:trickle])

    train = Dataset(np.concatenate(train_feat), np.concatenate(train_lab), space, d)
    test = Dataset(np.concatenate(test_feat), np.concatenate(test_lab), space, d)
    return train, test, edge_pool, out_pool


def gen_attacker_pool(
    spec: SyntheticSpec, seed: int, pool_seed: int = 0, per_class: int = 512
) -> Dataset:
    """Fresh samples from the same benign class generators as gen_synthetic(seed).

    The attacker owns its data, so this pool is drawn independently of the
    benign train/test streams but from identical class-conditional
    distributions (the class means are a function of `seed` alone).
    """
    ss = np.random.SeedSequence(int(seed))
    r_means = np.random.default_rng(ss.spawn(1)[0])
    means = _place_means(spec, r_means)
    rng = np.random.default_rng(
        np.random.SeedSequence(int(seed), spawn_key=(101, int(pool_seed)))
    )
    feats, labs = [], []
    for c in range(spec.class_count):
        feats.append(
            _sample_cluster(means[c], spec.cluster_spread, per_class, spec.feature_dim, rng)
        )
        labs.append(np.full(per_class, c))
    return Dataset(
        np.concatenate(feats), np.concatenate(labs), spec.label_space, spec.feature_dim
    )


@dataclass
class PartitionPlan:
    """Disjoint assignment of master-dataset indices to clients."""

    assignments: tuple[np.ndarray, ...]
    dataset_size: int

    def __post_init__(self):
        self.assignments = tuple(
            np.asarray(a, dtype=np.int64) for a in self.assignments
        )
        flat = np.concatenate(self.assignments) if self.assignments else np.zeros(0)
        if flat.size != self.dataset_size or not np.array_equal(
            np.sort(flat), np.arange(self.dataset_size)
        ):
            raise DataError("assignments must partition the dataset indices exactly")
        if any(a.size == 0 for a in self.assignments):
            raise DataError("every client must receive at least one example")

    @property
    def client_count(self) -> int:
        return len(self.assignments)

    def client_dataset(self, dataset: Dataset, client_id: int) -> Dataset:
        return dataset.subset(self.assignments[client_id])


def dirichlet_partition(
    dataset: Dataset, n_clients: int, alpha: float, seed: int
) -> PartitionPlan:
    """Split a dataset across clients with per-class Dirichlet(alpha) shares.

    Small alpha concentrates each class on few clients; large alpha
    approaches a uniform split. Clients that come out empty are given one
    example from whichever client is largest at that point.
    """
    if n_clients < 1:
        raise ConfigurationError(f"need at least one client, got {n_clients}")
    if alpha <= 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    if len(dataset) < n_clients:
        raise ConfigurationError(
            f"{n_clients} clients but only {len(dataset)} examples"
        )
    rng = np.random.default_rng(seed)
    per_client: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in np.unique(dataset.labels):
        idx = dataset.class_indices(int(c))
        rng.shuffle(idx)
        shares = rng.dirichlet(np.full(n_clients, alpha))
        bounds = np.floor(np.cumsum(shares) * idx.size).astype(int)
        bounds[-1] = idx.size
        start = 0
        for k in range(n_clients):
            per_client[k].append(idx[start : bounds[k]])
            start = bounds[k]
    parts = [
        np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
        for chunks in per_client
    ]
    # reassign one example from the largest client to each empty one
    sizes = np.array([p.size for p in parts])
    for k in range(n_clients):
        if sizes[k] == 0:
            donor = int(np.argmax(sizes))
            parts[k] = parts[donor][-1:]
            parts[donor] = parts[donor][:-1]
            sizes[k] = 1
            sizes[donor] -= 1
    return PartitionPlan(tuple(parts), len(dataset))


@dataclass(frozen=True)
class BackdoorSpec:
    """What the attacker poisons and how its training dataset is mixed.

    kind "in":   examples of `target_class` relabeled `backdoor_label`.
    kind "edge": edge-pool examples (true label `true_label`) relabeled.
    kind "out":  out-pool examples (a class absent from benign data) labeled
                 with a benign `backdoor_label`.
    """

    kind: str
    backdoor_label: int
    target_class: Optional[int] = None
    true_label: Optional[int] = None
    out_class: Optional[int] = None
    edge_subpop_id: str = "edge"
    dataset_size: int = 512
    malicious_fraction: float = 0.4

    def __post_init__(self):
        if self.kind not in ("in", "edge", "out"):
            raise ConfigurationError(f"unknown backdoor kind {self.kind!r}")
        if self.dataset_size < 1:
            raise ConfigurationError("dataset_size must be positive")
        if not 0.0 < self.malicious_fraction < 1.0:
            raise ConfigurationError("malicious_fraction must be in (0, 1)")
        if self.kind == "in":
            if self.target_class is None:
                raise ConfigurationError("IN backdoor needs target_class")
            if self.backdoor_label == self.target_class:
                raise ConfigurationError("IN backdoor label must differ from target")
        if self.kind == "edge":
            if self.true_label is None:
                raise ConfigurationError("EDGE backdoor needs true_label")
            if self.backdoor_label == self.true_label:
                raise ConfigurationError("EDGE backdoor label must differ from true label")
        if self.kind == "out" and self.out_class is None:
            raise ConfigurationError("OUT backdoor needs out_class")


def mix_counts(spec: BackdoorSpec) -> tuple[int, int]:
    """(benign, malicious) example counts for the attacker dataset.

    The correctly-labeled share is rounded up; the backdoor instances get
    the remainder.
    """
    benign = math.ceil((1.0 - spec.malicious_fraction) * spec.dataset_size)
    return benign, spec.dataset_size - benign


def _malicious_source(
    benign_pool: Dataset, edge_pool: Dataset, out_pool: Dataset, spec: BackdoorSpec
) -> tuple[Dataset, np.ndarray]:
    if spec.kind == "in":
        return benign_pool, benign_pool.class_indices(spec.target_class)
    if spec.kind == "edge":
        if spec.true_label is not None and len(edge_pool):
            if not np.all(edge_pool.labels == spec.true_label):
                raise DataError(
                    f"edge pool is labeled {np.unique(edge_pool.labels)}, "
                    f"spec expects true label {spec.true_label}"
                )
        return edge_pool, np.arange(len(edge_pool))
    benign_classes = set(np.unique(benign_pool.labels).tolist())
    if spec.out_class in benign_classes:
        raise ConfigurationError(
            f"out class {spec.out_class} appears in the benign pool"
        )
    if spec.backdoor_label not in benign_classes:
        raise ConfigurationError(
            f"OUT backdoor label {spec.backdoor_label} must be a benign class"
        )
    return out_pool, np.arange(len(out_pool))


def _malicious_permutation(n_source: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(2,)))
    return rng.permutation(n_source)


def build_backdoor_dataset(
    benign_pool: Dataset,
    edge_pool: Dataset,
    out_pool: Dataset,
    spec: BackdoorSpec,
    seed: int,
) -> Dataset:
    """The attacker's training dataset: a benign majority plus backdoor instances.

    Calling backdoor_test_set with the same pools, spec, and seed yields
    instances disjoint from the ones used here.
    """
    benign_n, mal_n = mix_counts(spec)
    if benign_n > len(benign_pool):
        raise DataError(
            f"benign pool has {len(benign_pool)} examples, need {benign_n}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(1,)))
    benign_idx = rng.choice(len(benign_pool), benign_n, replace=False)
    benign_part = benign_pool.subset(benign_idx)

    source, src_idx = _malicious_source(benign_pool, edge_pool, out_pool, spec)
    if mal_n > src_idx.size:
        raise DataError(
            f"{spec.kind.upper()} source has {src_idx.size} examples, need {mal_n}"
        )
    perm = _malicious_permutation(src_idx.size, seed)
    take = src_idx[perm[:mal_n]]
    malicious_part = Dataset(
        source.features[take],
        np.full(mal_n, spec.backdoor_label),
        benign_pool.class_count,
        benign_pool.feature_dim,
    )
    return concat(benign_part, malicious_part)


def backdoor_test_set(
    benign_pool: Dataset,
    edge_pool: Dataset,
    out_pool: Dataset,
    spec: BackdoorSpec,
    size: int,
    seed: int,
) -> Dataset:
    """Held-out backdoor instances (never used for attacker training)."""
    if size < 1:
        raise ConfigurationError("backdoor test size must be positive")
    _, mal_n = mix_counts(spec)
    source, src_idx = _malicious_source(benign_pool, edge_pool, out_pool, spec)
    if mal_n + size > src_idx.size:
        raise DataError(
            f"{spec.kind.upper()} source has {src_idx.size} examples, "
            f"need {mal_n} for training plus {size} held out"
        )
    perm = _malicious_permutation(src_idx.size, seed)
    take = src_idx[perm[mal_n : mal_n + size]]
    return Dataset(
        source.features[take],
        np.full(size, spec.backdoor_label),
        benign_pool.class_count,
        benign_pool.feature_dim,
    )


def strip_class(dataset: Dataset, class_id: int) -> Dataset:
    """Remove every example of one class, preserving the order of the rest."""
    keep = dataset.labels != class_id
    return Dataset(
        dataset.features[keep],
        dataset.labels[keep],
        dataset.class_count,
        dataset.feature_dim,
    )


def load_csv(path) -> Dataset:
    """Load a dataset from CSV with header f0,...,f{d-1},label."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        d = len(header) - 1
        expected = [f"f{i}" for i in range(d)] + ["label"]
        if d < 1 or header != expected:
            raise DataError(
                f"{path}: header must be f0,...,f{{d-1}},label, got {header}"
            )
        feats, labs = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise DataError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                feats.append([float(v) for v in row[:d]])
                label = int(row[d])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if label < 0:
                raise DataError(f"{path}:{lineno}: label must be non-negative")
            labs.append(label)
    if not labs:
        raise DataError(f"{path}: no data rows")
    labels = np.asarray(labs)
    return Dataset(np.asarray(feats), labels, int(labels.max()) + 1, d)
