"""Round orchestration: client selection, local training dispatch, defended
aggregation, and per-round recording.

Everything is a pure function of the experiment seed. Per-client training
streams are keyed by (seed, round, client id), so results are independent
of scheduling order and of how many worker threads run the local training.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import Dataset
from .defenses import Defense, DefenseContext, DeltaAggregator, Submission, ValidationSlice
from .errors import ConfigurationError
from .metrics import MetricSeries, back_acc, ben_acc
from .nn import ModelArch, ParamVec, init_model, l2_distance, sgd_train
from .seeds import derive_rng, derive_seed


@dataclass(frozen=True)
class ExperimentConfig:
    total_clients: int = 100
    clients_per_round: int = 10
    total_rounds: int = 400
    attack_start: int = 50
    attack_end: int = 200
    global_lr: float = 1.0
    local_epochs: int = 2
    local_lr: float = 0.05
    local_batch_size: int = 32
    mode: str = "cross_device"  # or "cross_silo"
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.clients_per_round <= self.total_clients:
            raise ConfigurationError(
                f"need 1 <= clients_per_round <= total_clients, got "
                f"{self.clients_per_round} of {self.total_clients}"
            )
        if self.mode not in ("cross_device", "cross_silo"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.mode == "cross_silo" and self.clients_per_round != self.total_clients:
            raise ConfigurationError("cross_silo requires clients_per_round == total_clients")
        if not 0 <= self.attack_start <= self.attack_end <= self.total_rounds:
            raise ConfigurationError(
                f"attack window [{self.attack_start}, {self.attack_end}) must sit "
                f"inside [0, {self.total_rounds})"
            )
        if self.total_rounds < 1 or self.local_epochs < 0:
            raise ConfigurationError("rounds must be >= 1 and local epochs >= 0")

    def in_attack_window(self, round_index: int) -> bool:
        return self.attack_start <= round_index < self.attack_end


@dataclass(frozen=True)
class AttackSchedule:
    kind: str = "persistent"  # or "random"
    persistent_count: int = 1
    malicious_fraction: float = 0.01

    def __post_init__(self):
        if self.kind not in ("persistent", "random"):
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if self.persistent_count < 0:
            raise ConfigurationError("persistent_count must be >= 0")
        if not 0.0 <= self.malicious_fraction <= 1.0:
            raise ConfigurationError("malicious_fraction must be in [0, 1]")


@dataclass(frozen=True)
class LocalTrainParams:
    epochs: int
    lr: float
    batch_size: int


@dataclass
class UpdateBundle:
    """One client's round output. The malicious flag is ground truth carried
    out-of-band for metrics only; defenses never see it."""

    client_id: int
    update: ParamVec
    is_malicious: bool
    update_norm: float


def make_bundle(client_id: int, update: ParamVec, is_malicious: bool) -> UpdateBundle:
    return UpdateBundle(client_id, update, is_malicious, update.norm())


@dataclass
class RoundRecord:
    round_index: int
    global_update_norm: float
    accepted_ids: tuple[int, ...]
    rejected_ids: tuple[int, ...]
    back_acc: float
    ben_acc: float
    attacker_mean_update_norm: Optional[float]
    region_estimate: Optional[float]
    benign_norm_min: Optional[float]
    benign_norm_max: Optional[float]
    malicious_ids: tuple[int, ...]
    update_norms: dict[int, float]
    accepted_benign: int
    accepted_malicious: int
    diagnostics: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "round": self.round_index,
            "global_update_norm": self.global_update_norm,
            "accepted_ids": list(self.accepted_ids),
            "rejected_ids": list(self.rejected_ids),
            "back_acc": self.back_acc,
            "ben_acc": self.ben_acc,
            "attacker_mean_update_norm": self.attacker_mean_update_norm,
            "region_estimate": self.region_estimate,
            "benign_norm_min": self.benign_norm_min,
            "benign_norm_max": self.benign_norm_max,
            "malicious_ids": list(self.malicious_ids),
            "update_norms": {str(k): v for k, v in self.update_norms.items()},
            "accepted_benign": self.accepted_benign,
            "accepted_malicious": self.accepted_malicious,
            "diagnostics": self.diagnostics,
        }


def attacker_ids(config: ExperimentConfig, schedule: AttackSchedule) -> frozenset[int]:
    """The fixed set of compromised client ids for the whole experiment."""
    if schedule.kind == "persistent":
        return frozenset(range(schedule.persistent_count))
    count = int(np.ceil(schedule.malicious_fraction * config.total_clients))
    if count == 0:
        return frozenset()
    rng = derive_rng(config.seed, "attacker-set")
    return frozenset(
        int(i) for i in rng.choice(config.total_clients, count, replace=False)
    )


def select_clients(
    round_index: int,
    config: ExperimentConfig,
    schedule: Optional[AttackSchedule],
    attackers: frozenset[int],
) -> list[tuple[int, str]]:
    """Pick this round's participants as (client_id, role) sorted by id.

    cross_silo uses every client. cross_device draws clients_per_round ids
    uniformly without replacement; a persistent adversary's clients are
    forced into every attack-window round.
    """
    in_window = (
        schedule is not None and attackers and config.in_attack_window(round_index)
    )
    if config.mode == "cross_silo":
        chosen = list(range(config.total_clients))
    elif in_window and schedule.kind == "persistent":
        forced = sorted(attackers)
        rng = derive_rng(config.seed, "select", round_index)
        rest = [c for c in range(config.total_clients) if c not in attackers]
        extra = rng.choice(len(rest), config.clients_per_round - len(forced), replace=False)
        chosen = forced + [rest[i] for i in extra]
    else:
        rng = derive_rng(config.seed, "select", round_index)
        chosen = [
            int(c)
            for c in rng.choice(config.total_clients, config.clients_per_round, replace=False)
        ]
    roster = [
        (cid, "malicious" if in_window and cid in attackers else "benign")
        for cid in sorted(chosen)
    ]
    return roster


def client_round(
    global_model: ParamVec,
    arch: ModelArch,
    dataset: Dataset,
    local: LocalTrainParams,
    seed,
    client_id: int,
) -> UpdateBundle:
    """Benign local training: SGD from the global model, update = L - G."""
    trained = sgd_train(
        global_model,
        arch,
        dataset,
        epochs=local.epochs,
        lr=local.lr,
        batch_size=local.batch_size,
        seed=seed,
    )
    return make_bundle(client_id, trained - global_model, False)


def aggregate_fedavg(
    global_model: ParamVec,
    updates: list[ParamVec],
    global_lr: float = 1.0,
    weights: Optional[list[float]] = None,
) -> ParamVec:
    """FedAvg: G + (lr/n) * sum(updates), summed in the given (client id) order.

    With weights, the plain mean becomes a weighted mean. An empty list (a
    defense rejected everything) leaves the global model untouched.
    """
    if not updates:
        return global_model
    if weights is None:
        total = updates[0].values.copy()
        for u in updates[1:]:
            total += u.values
        delta = total / len(updates)
    else:
        wsum = float(sum(weights))
        if wsum <= 0.0:
            return global_model
        total = updates[0].values * weights[0]
        for u, w in zip(updates[1:], weights[1:]):
            total += u.values * w
        delta = total / wsum
    return ParamVec(global_model.values + global_lr * delta, global_model.layer_map)


@dataclass
class RunEnv:
    """Everything the engine needs besides configuration."""

    arch: ModelArch
    client_datasets: list[Dataset]
    benign_test: Dataset
    backdoor_test: Optional[Dataset] = None
    validation: Optional[ValidationSlice] = None


def run_rounds(
    config: ExperimentConfig,
    schedule: Optional[AttackSchedule],
    attack,
    defense,
    env: RunEnv,
    *,
    threads: int = 1,
    config_hash: str = "",
    progress: Optional[Callable[[int, RoundRecord], None]] = None,
) -> tuple[MetricSeries, list[RoundRecord]]:
    """Run the full experiment and return (MetricSeries, per-round records).

    Benign local training within a round may run on a thread pool; results
    are independent of the worker count because each client's stream is
    keyed by (seed, round, client id) and aggregation is ordered by id.
    """
    if len(env.client_datasets) != config.total_clients:
        raise ConfigurationError(
            f"{len(env.client_datasets)} client datasets for "
            f"{config.total_clients} clients"
        )
    attackers = attacker_ids(config, schedule) if (schedule and attack) else frozenset()
    local = LocalTrainParams(config.local_epochs, config.local_lr, config.local_batch_size)
    G = init_model(env.arch, derive_seed(config.seed, "init"))
    records: list[RoundRecord] = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for r in range(config.total_rounds):
            roster = select_clients(r, config, schedule if attack else None, attackers)
            benign_jobs = [(cid, role) for cid, role in roster if role == "benign"]
            malicious_jobs = [cid for cid, role in roster if role == "malicious"]

            def train_one(cid: int) -> UpdateBundle:
                return client_round(
                    G,
                    env.arch,
                    env.client_datasets[cid],
                    local,
                    derive_seed(config.seed, "client", r, cid),
                    cid,
                )

            if pool is not None:
                benign_bundles = list(pool.map(train_one, (c for c, _ in benign_jobs)))
            else:
                benign_bundles = [train_one(cid) for cid, _ in benign_jobs]

            region = None
            malicious_bundles: list[UpdateBundle] = []
            if malicious_jobs:
                cohort = [(cid, env.client_datasets[cid]) for cid in malicious_jobs]
                malicious_bundles, region = attack.round_updates(
                    r, G, env.arch, cohort, local
                )

            bundles = sorted(benign_bundles + malicious_bundles, key=lambda b: b.client_id)
            flags = {b.client_id: b.is_malicious for b in bundles}
            submissions = [Submission(b.client_id, b.update) for b in bundles]

            diagnostics: dict = {}
            if defense is None:
                accepted = tuple(b.client_id for b in bundles)
                rejected: tuple[int, ...] = ()
                G_next = aggregate_fedavg(G, [b.update for b in bundles], config.global_lr)
            elif isinstance(defense, DeltaAggregator):
                ctx = _context(r, G, env, config)
                delta = defense.aggregate(submissions, ctx)
                accepted = tuple(b.client_id for b in bundles)
                rejected = ()
                G_next = ParamVec(
                    G.values + config.global_lr * delta.values, G.layer_map
                )
            else:
                ctx = _context(r, G, env, config)
                verdict = defense(submissions, ctx)
                accepted = tuple(sorted(verdict.accepted_ids))
                rejected = tuple(sorted(verdict.rejected_ids))
                updates = [verdict.transformed[i] for i in accepted]
                weights = [verdict.weights[i] for i in accepted]
                diagnostics = verdict.diagnostics
                G_next = aggregate_fedavg(G, updates, config.global_lr, weights)

            gu = l2_distance(G_next, G)
            back = back_acc(G_next, env.arch, env.backdoor_test) if env.backdoor_test else 0.0
            ben = ben_acc(G_next, env.arch, env.benign_test)

            mal_bundles = [b for b in bundles if b.is_malicious]
            benign_norms = [b.update_norm for b in bundles if not b.is_malicious]
            a_mean = float(np.mean([b.update_norm for b in mal_bundles])) if mal_bundles else None
            if attack is not None:
                attack.observe_round(r, G_next - G, a_mean)

            record = RoundRecord(
                round_index=r,
                global_update_norm=gu,
                accepted_ids=accepted,
                rejected_ids=rejected,
                back_acc=back,
                ben_acc=ben,
                attacker_mean_update_norm=a_mean,
                region_estimate=region,
                benign_norm_min=min(benign_norms) if benign_norms else None,
                benign_norm_max=max(benign_norms) if benign_norms else None,
                malicious_ids=tuple(b.client_id for b in mal_bundles),
                update_norms={b.client_id: b.update_norm for b in bundles},
                accepted_benign=sum(1 for i in accepted if not flags[i]),
                accepted_malicious=sum(1 for i in accepted if flags[i]),
                diagnostics=diagnostics,
            )
            records.append(record)
            if progress is not None:
                progress(r, record)
            G = G_next
    finally:
        if pool is not None:
            pool.shutdown()

    series = MetricSeries.from_records(records, config_hash=config_hash, seed=config.seed)
    return series, records


def _context(round_index: int, G: ParamVec, env: RunEnv, config: ExperimentConfig) -> DefenseContext:
    return DefenseContext(
        round_index=round_index,
        global_model=G,
        arch=env.arch,
        rng=derive_rng(config.seed, "defense", round_index),
        validation=env.validation,
    )
