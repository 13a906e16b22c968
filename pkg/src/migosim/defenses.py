"""Server-side defenses: filtering/transforming rules applied before FedAvg.

Each filtering defense maps the round's submissions to a DefenseVerdict
(accepted ids, per-update weights, transformed updates). Robust-statistic
aggregators (median, trimmed mean) bypass filtering and produce the round
delta directly. Defenses only ever see client ids and raw update vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.fft
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from .data import Dataset
from .errors import ConfigurationError, DataError
from .nn import Batch, ModelArch, ParamVec, ce_loss


@dataclass(frozen=True)
class Submission:
    """What the server sees from one client: an id and a raw update."""

    client_id: int
    update: ParamVec


@dataclass
class DefenseContext:
    """Round-scoped inputs a defense may use (never ground-truth roles)."""

    round_index: int
    global_model: ParamVec
    arch: ModelArch
    rng: np.random.Generator
    validation: Optional["ValidationSlice"] = None


@dataclass
class DefenseVerdict:
    accepted_ids: tuple[int, ...]
    rejected_ids: tuple[int, ...]
    weights: dict[int, float]
    transformed: dict[int, ParamVec]
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.accepted_ids) & set(self.rejected_ids):
            raise ValueError("accepted and rejected ids overlap")
        if set(self.transformed) != set(self.accepted_ids):
            raise ValueError("transformed updates must cover exactly the accepted ids")


def make_verdict(
    submissions: list[Submission],
    accepted_ids,
    transformed: Optional[dict[int, ParamVec]] = None,
    weights: Optional[dict[int, float]] = None,
    diagnostics: Optional[dict] = None,
) -> DefenseVerdict:
    accepted = tuple(sorted(accepted_ids))
    rejected = tuple(sorted(s.client_id for s in submissions if s.client_id not in accepted))
    by_id = {s.client_id: s.update for s in submissions}
    if transformed is None:
        transformed = {i: by_id[i] for i in accepted}
    if weights is None:
        weights = {}
    full_weights = {s.client_id: 0.0 for s in submissions}
    for i in accepted:
        full_weights[i] = float(weights.get(i, 1.0))
    return DefenseVerdict(accepted, rejected, full_weights, transformed, diagnostics or {})


class Defense:
    """Base class for filtering defenses."""

    name = "defense"

    def __call__(self, submissions: list[Submission], ctx: DefenseContext) -> DefenseVerdict:
        raise NotImplementedError


class DeltaAggregator:
    """Base class for defenses that replace the mean with a robust statistic."""

    name = "aggregator"

    def aggregate(self, submissions: list[Submission], ctx: DefenseContext) -> ParamVec:
        raise NotImplementedError


# ---------------------------------------------------------------- helpers


def clip_to_norm(update: ParamVec, bound: float) -> ParamVec:
    n = update.norm()
    if n <= bound:
        return update
    return update * (bound / n)


def dct_ii(vector) -> np.ndarray:
    """Orthonormal DCT-II of a flat vector (self-inverse up to idct_ii)."""
    return scipy.fft.dct(np.asarray(vector, dtype=np.float64), type=2, norm="ortho")


def idct_ii(coeffs) -> np.ndarray:
    return scipy.fft.idct(np.asarray(coeffs, dtype=np.float64), type=2, norm="ortho")


def cosine_distance_matrix(vectors: np.ndarray) -> np.ndarray:
    """Pairwise cosine distances in [0, 2]. Zero vectors sit at distance 0
    from each other and 1 from everything else."""
    V = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(V, axis=1)
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    sims = (V @ V.T) / np.outer(safe, safe)
    np.clip(sims, -1.0, 1.0, out=sims)
    dist = 1.0 - sims
    dist[zero, :] = 1.0
    dist[:, zero] = 1.0
    dist[np.ix_(zero, zero)] = 0.0
    np.fill_diagonal(dist, 0.0)
    return dist


def agglomerative_clusters(dist: np.ndarray, threshold: float) -> list[list[int]]:
    """Average-linkage clusters cut at `threshold`, ordered by first member."""
    n = dist.shape[0]
    if n == 1:
        return [[0]]
    Z = linkage(squareform(dist, checks=False), method="average")
    labels = fcluster(Z, t=threshold, criterion="distance")
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def _largest_cluster(clusters: list[list[int]]) -> list[int]:
    # ties go to the cluster containing the lowest index
    best = max(clusters, key=lambda g: (len(g), -min(g)))
    return best


# ---------------------------------------------------------------- defenses


class NormClip(Defense):
    """Rescale every update whose L2 norm exceeds the threshold."""

    name = "norm_clip"

    def __init__(self, tau: float):
        if tau <= 0:
            raise ConfigurationError(f"clip threshold must be positive, got {tau}")
        self.tau = float(tau)

    def __call__(self, submissions, ctx):
        transformed = {s.client_id: clip_to_norm(s.update, self.tau) for s in submissions}
        return make_verdict(
            submissions, [s.client_id for s in submissions], transformed
        )


class NormClipNoise(Defense):
    """Norm clipping followed by i.i.d. Gaussian noise on every coordinate."""

    name = "nc_noise"

    def __init__(self, tau: float, sigma: float):
        if tau <= 0 or sigma < 0:
            raise ConfigurationError("need tau > 0 and sigma >= 0")
        self.tau = float(tau)
        self.sigma = float(sigma)

    def __call__(self, submissions, ctx):
        transformed = {}
        for s in submissions:  # engine passes submissions in client-id order
            clipped = clip_to_norm(s.update, self.tau)
            if self.sigma > 0:
                noise = ctx.rng.normal(0.0, self.sigma, len(clipped))
                clipped = ParamVec(clipped.values + noise, clipped.layer_map)
            transformed[s.client_id] = clipped
        return make_verdict(submissions, [s.client_id for s in submissions], transformed)


def _krum_scores(submissions: list[Submission], f: int) -> np.ndarray:
    n = len(submissions)
    if n < f + 3:
        raise ConfigurationError(f"krum needs at least f+3={f + 3} updates, got {n}")
    U = np.stack([s.update.values for s in submissions])
    diffs = U[:, None, :] - U[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diffs, diffs)
    k = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(d2[i], i)
        others.sort()
        scores[i] = others[:k].sum()
    return scores


class Krum(Defense):
    """Accept the single update closest (summed squared distance) to its
    n-f-2 nearest neighbors; ties break toward the lowest client id."""

    name = "krum"

    def __init__(self, f: int):
        if f < 0:
            raise ConfigurationError("f must be >= 0")
        self.f = int(f)

    def __call__(self, submissions, ctx):
        ordered = sorted(submissions, key=lambda s: s.client_id)
        scores = _krum_scores(ordered, self.f)
        winner = ordered[int(np.argmin(scores))].client_id
        return make_verdict(
            submissions,
            [winner],
            diagnostics={"scores": {s.client_id: float(v) for s, v in zip(ordered, scores)}},
        )


class MultiKrum(Defense):
    """Accept the m lowest-scoring updates under the krum score."""

    name = "mkrum"

    def __init__(self, f: int, m: int):
        if m < 1:
            raise ConfigurationError("m must be >= 1")
        self.f = int(f)
        self.m = int(m)

    def __call__(self, submissions, ctx):
        ordered = sorted(submissions, key=lambda s: s.client_id)
        scores = _krum_scores(ordered, self.f)
        ranked = sorted(zip(scores, (s.client_id for s in ordered)))
        accepted = [cid for _, cid in ranked[: min(self.m, len(ordered))]]
        return make_verdict(
            submissions,
            accepted,
            diagnostics={"scores": {s.client_id: float(v) for s, v in zip(ordered, scores)}},
        )


@dataclass
class FoolsGoldState:
    """Per-client cumulative output-layer update vectors."""

    histories: dict[int, np.ndarray] = field(default_factory=dict)


class FoolsGold(Defense):
    """Down-weight clients whose historical output-layer updates are too
    mutually similar (Sybil suppression); aggregation uses the weights."""

    name = "foolsgold"

    def __init__(self):
        self.state = FoolsGoldState()

    def __call__(self, submissions, ctx):
        hist = self.state.histories
        for s in submissions:
            block = s.update.block(-1)
            if s.client_id in hist:
                hist[s.client_id] = hist[s.client_id] + block
            else:
                hist[s.client_id] = block.copy()
        ordered = sorted(submissions, key=lambda s: s.client_id)
        H = np.stack([hist[s.client_id] for s in ordered])
        sims = 1.0 - cosine_distance_matrix(H)
        weights = {}
        for i, s in enumerate(ordered):
            if len(ordered) == 1:
                max_cs = 0.0
            else:
                max_cs = float(np.max(np.delete(sims[i], i)))
            weights[s.client_id] = float(np.clip(1.0 - max_cs, 0.0, 1.0))
        return make_verdict(
            submissions,
            [s.client_id for s in submissions],
            weights=weights,
            diagnostics={"weights": dict(weights)},
        )


class FlameLite(Defense):
    """Cluster on cosine distance, keep the largest cluster, clip those
    updates to the median accepted norm, then add small Gaussian noise.

    The norm bound is re-enforced after the noise so the clip guarantee
    survives it.
    """

    name = "flame"

    def __init__(self, theta: float = 0.15, sigma: float = 1e-3):
        self.theta = float(theta)
        self.sigma = float(sigma)

    def __call__(self, submissions, ctx):
        ordered = sorted(submissions, key=lambda s: s.client_id)
        U = np.stack([s.update.values for s in ordered])
        clusters = agglomerative_clusters(cosine_distance_matrix(U), self.theta)
        keep = _largest_cluster(clusters)
        accepted = [ordered[i].client_id for i in keep]
        bound = float(np.median([ordered[i].update.norm() for i in keep]))
        transformed = {}
        for i in keep:
            s = ordered[i]
            clipped = clip_to_norm(s.update, bound)
            if self.sigma > 0:
                noise = ctx.rng.normal(0.0, self.sigma, len(clipped))
                clipped = clip_to_norm(
                    ParamVec(clipped.values + noise, clipped.layer_map), bound
                )
            transformed[s.client_id] = clipped
        labels = {
            ordered[i].client_id: ci for ci, cl in enumerate(clusters) for i in cl
        }
        return make_verdict(
            submissions,
            accepted,
            transformed,
            diagnostics={"clusters": labels, "norm_bound": bound},
        )


class FreqFed(Defense):
    """Cluster low-frequency DCT fingerprints of the updates and accept the
    largest cluster; accepted updates pass through untransformed."""

    name = "freqfed"

    def __init__(self, theta: float = 0.15, low_freq_fraction: float = 0.25):
        if not 0.0 < low_freq_fraction <= 1.0:
            raise ConfigurationError("low_freq_fraction must be in (0, 1]")
        self.theta = float(theta)
        self.low_freq_fraction = float(low_freq_fraction)

    def fingerprint(self, update: ParamVec) -> np.ndarray:
        keep = max(1, int(np.ceil(self.low_freq_fraction * len(update))))
        return dct_ii(update.values)[:keep]

    def __call__(self, submissions, ctx):
        ordered = sorted(submissions, key=lambda s: s.client_id)
        F = np.stack([self.fingerprint(s.update) for s in ordered])
        clusters = agglomerative_clusters(cosine_distance_matrix(F), self.theta)
        keep = _largest_cluster(clusters)
        accepted = [ordered[i].client_id for i in keep]
        labels = {
            ordered[i].client_id: ci for ci, cl in enumerate(clusters) for i in cl
        }
        return make_verdict(submissions, accepted, diagnostics={"clusters": labels})


@dataclass
class ValidationSlice:
    """Server-held labeled examples, partitioned by class, for defense-side
    evaluation. Must be disjoint from all client training data."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) == 0:
            raise DataError("validation slice is empty")

    @classmethod
    def from_dataset(cls, dataset: Dataset, per_class: int) -> "ValidationSlice":
        take = []
        for c in np.unique(dataset.labels):
            idx = dataset.class_indices(int(c))[:per_class]
            take.append(idx)
        idx = np.concatenate(take)
        return cls(dataset.features[idx], dataset.labels[idx])

    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def class_batch(self, class_id: int) -> Batch:
        mask = self.labels == class_id
        return Batch(self.features[mask], self.labels[mask])


# three times the median benign-round LIPC observed on the default task
DEFAULT_LIPC_THRESHOLD = 0.116


class FlShieldLite(Defense):
    """Cluster updates, then score each cluster by the worst per-class loss
    increase of its representative model over the previous global model
    (LIPC). Clusters above the threshold are rejected wholesale."""

    name = "flshield"

    def __init__(self, theta: float = 0.15, lipc_threshold: float = DEFAULT_LIPC_THRESHOLD):
        self.theta = float(theta)
        self.lipc_threshold = float(lipc_threshold)

    def __call__(self, submissions, ctx):
        if ctx.validation is None:
            raise ConfigurationError("flshield needs a validation slice")
        ordered = sorted(submissions, key=lambda s: s.client_id)
        U = np.stack([s.update.values for s in ordered])
        clusters = agglomerative_clusters(cosine_distance_matrix(U), self.theta)
        base_loss = {
            int(c): ce_loss(ctx.global_model, ctx.arch, ctx.validation.class_batch(int(c)))
            for c in ctx.validation.classes()
        }
        accepted: list[int] = []
        lipc_by_cluster = {}
        for ci, members in enumerate(clusters):
            rep = ParamVec(
                ctx.global_model.values + np.median(U[members], axis=0),
                ctx.global_model.layer_map,
            )
            lipc = max(
                ce_loss(rep, ctx.arch, ctx.validation.class_batch(int(c))) - base_loss[int(c)]
                for c in ctx.validation.classes()
            )
            lipc_by_cluster[ci] = float(lipc)
            if lipc <= self.lipc_threshold:
                accepted.extend(ordered[i].client_id for i in members)
        labels = {
            ordered[i].client_id: ci for ci, cl in enumerate(clusters) for i in cl
        }
        return make_verdict(
            submissions,
            accepted,
            diagnostics={"clusters": labels, "lipc": lipc_by_cluster},
        )


# ------------------------------------------------- robust statistics


def median_agg(updates: list[ParamVec]) -> ParamVec:
    """Coordinate-wise median of the updates."""
    if not updates:
        raise DataError("median of zero updates")
    stack = np.stack([u.values for u in updates])
    return ParamVec(np.median(stack, axis=0), updates[0].layer_map)


def trimmed_mean_agg(updates: list[ParamVec], trim_fraction: float) -> ParamVec:
    """Coordinate-wise mean after dropping floor(trim*n) values at each end."""
    if not updates:
        raise DataError("trimmed mean of zero updates")
    if not 0.0 <= trim_fraction < 0.5:
        raise ConfigurationError("trim_fraction must be in [0, 0.5)")
    n = len(updates)
    g = int(trim_fraction * n)
    if n - 2 * g < 1:
        raise ConfigurationError(f"trimming {g} per side leaves nothing of {n}")
    stack = np.sort(np.stack([u.values for u in updates]), axis=0)
    kept = stack[g : n - g] if g else stack
    return ParamVec(kept.mean(axis=0), updates[0].layer_map)


class MedianAgg(DeltaAggregator):
    name = "median"

    def aggregate(self, submissions, ctx):
        ordered = sorted(submissions, key=lambda s: s.client_id)
        return median_agg([s.update for s in ordered])


class TrimmedMeanAgg(DeltaAggregator):
    name = "trimmed_mean"

    def __init__(self, trim_fraction: float = 0.2):
        self.trim_fraction = float(trim_fraction)

    def aggregate(self, submissions, ctx):
        ordered = sorted(submissions, key=lambda s: s.client_id)
        return trimmed_mean_agg([s.update for s in ordered], self.trim_fraction)
