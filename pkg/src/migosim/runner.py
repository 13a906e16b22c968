"""Composition root: build datasets, attack, and defense from a RunSpec,
execute the experiment, and persist its outputs."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import plots
from .attacks import BaselineAttack, BaselineConfig, LayerForcingConfig, MigoAttack, MigoConfig
from .config import AttackConfig, DefenseConfig, RunSpec, config_hash
from .data import (
    BackdoorSpec,
    Dataset,
    SyntheticSpec,
    backdoor_test_set,
    build_backdoor_dataset,
    dirichlet_partition,
    gen_attacker_pool,
    gen_synthetic,
    load_csv,
)
from .defenses import (
    FlameLite,
    FlShieldLite,
    FoolsGold,
    FreqFed,
    Krum,
    MedianAgg,
    MultiKrum,
    NormClip,
    NormClipNoise,
    TrimmedMeanAgg,
    ValidationSlice,
)
from .engine import AttackSchedule, ExperimentConfig, RoundRecord, RunEnv, run_rounds
from .errors import ConfigurationError
from .metrics import MetricSeries, SummaryReport, summarize
from .nn import ModelArch
from .seeds import derive_seed


def resolve_backdoor_spec(spec: RunSpec) -> Optional[BackdoorSpec]:
    if spec.attack.kind == "none":
        return None
    a, d = spec.attack, spec.data
    label = a.backdoor_label if a.backdoor_label is not None else d.classes - 1
    return BackdoorSpec(
        kind=a.backdoor,
        backdoor_label=label,
        target_class=a.target_class if a.backdoor == "in" else None,
        true_label=(a.true_label if a.true_label is not None else d.edge_parent_class)
        if a.backdoor == "edge"
        else None,
        out_class=(a.out_class if a.out_class is not None else d.classes)
        if a.backdoor == "out"
        else None,
        dataset_size=a.dataset_size,
        malicious_fraction=a.poison_fraction,
    )


def build_synthetic_spec(spec: RunSpec) -> SyntheticSpec:
    d = spec.data
    return SyntheticSpec(
        class_count=d.classes,
        feature_dim=d.feature_dim,
        samples_per_class=d.samples_per_class,
        cluster_spread=d.cluster_spread,
        class_separation=d.class_separation,
        edge_subpop_fraction=d.edge_subpop_fraction,
        out_class_present=(spec.attack.kind != "none" and spec.attack.backdoor == "out"),
        test_per_class=d.test_per_class,
        edge_parent_class=d.edge_parent_class,
    )


def build_attack(spec: RunSpec, backdoor_dataset: Dataset, seed: int):
    a = spec.attack
    if a.kind == "none":
        return None
    if a.kind == "migo":
        if isinstance(a.mpr, str):
            mpr_mode, mpr_value = a.mpr, 0.3
        else:
            mpr_mode, mpr_value = "static", float(a.mpr)
        lf = None
        if a.layer_force:
            lf = LayerForcingConfig(
                selected_layers=a.forced_layers,
                benign_epochs=a.benign_epochs,
                finetune_batches=a.finetune_batches,
            )
        cfg = MigoConfig(
            esr=a.esr,
            mpr_mode=mpr_mode,
            mpr_value=mpr_value,
            beta=a.beta,
            beta_schedule=a.beta_schedule,
            alpha=a.alpha,
            r_default=a.r_default,
            layer_forcing=lf,
            epochs=a.attacker_epochs,
            lr=a.attacker_lr,
        )
        return MigoAttack(cfg, backdoor_dataset, seed)
    cfg = BaselineConfig(
        kind=a.kind,
        projection_radius=a.projection_radius,
        boost_factor=a.boost_factor,
        mask_fraction=a.mask_fraction,
        alpha=a.alpha,
        r_default=a.r_default,
    )
    return BaselineAttack(cfg, backdoor_dataset, seed)


def build_defense(cfg: DefenseConfig):
    if cfg.name == "none":
        return None
    if cfg.name == "norm_clip":
        return NormClip(cfg.tau)
    if cfg.name == "nc_noise":
        return NormClipNoise(cfg.tau, cfg.sigma)
    if cfg.name == "krum":
        return Krum(cfg.f)
    if cfg.name == "mkrum":
        return MultiKrum(cfg.f, cfg.m)
    if cfg.name == "foolsgold":
        return FoolsGold()
    if cfg.name == "flame":
        return FlameLite(cfg.theta, cfg.flame_sigma)
    if cfg.name == "freqfed":
        return FreqFed(cfg.theta, cfg.rho)
    if cfg.name == "flshield":
        return FlShieldLite(cfg.theta, cfg.lipc_lambda)
    if cfg.name == "median":
        return MedianAgg()
    if cfg.name == "trimmed_mean":
        return TrimmedMeanAgg(cfg.trim_fraction)
    raise ConfigurationError(f"unknown defense {cfg.name!r}")


@dataclass
class BuiltExperiment:
    config: ExperimentConfig
    schedule: AttackSchedule
    attack: object
    defense: object
    env: RunEnv
    hash: str


def _split_validation(test: Dataset, per_class: int) -> tuple[Dataset, Optional[ValidationSlice]]:
    """Carve a server-held validation slice off the front of each test class;
    the remainder stays the (still balanced) metric test set."""
    if per_class <= 0:
        return test, None
    keep = np.ones(len(test), dtype=bool)
    taken = []
    for c in np.unique(test.labels):
        idx = test.class_indices(int(c))[:per_class]
        taken.append(idx)
        keep[idx] = False
    if not keep.any():
        raise ConfigurationError("validation_per_class consumed the whole test set")
    val_idx = np.concatenate(taken)
    validation = ValidationSlice(test.features[val_idx], test.labels[val_idx])
    return test.subset(np.flatnonzero(keep)), validation


def build_experiment(spec: RunSpec) -> BuiltExperiment:
    exp = spec.experiment
    seed = exp.seed
    syn = build_synthetic_spec(spec)
    data_seed = derive_seed(seed, "data").generate_state(1)[0]

    if spec.data.csv is not None:
        if spec.attack.kind != "none" and spec.attack.backdoor != "in":
            raise ConfigurationError("csv datasets support only IN backdoors")
        full = load_csv(spec.data.csv)
        rng = np.random.default_rng(derive_seed(seed, "csv-split"))
        test_idx, train_idx = [], []
        for c in np.unique(full.labels):
            idx = full.class_indices(int(c))
            rng.shuffle(idx)
            take = min(spec.data.test_per_class, max(1, idx.size // 5))
            test_idx.append(idx[:take])
            train_idx.append(idx[take:])
        train = full.subset(np.concatenate(train_idx))
        test = full.subset(np.concatenate(test_idx))
        edge_pool = Dataset(
            np.zeros((0, full.feature_dim)), np.zeros(0, dtype=np.int64),
            full.class_count, full.feature_dim,
        )
        out_pool = edge_pool
        attacker_pool = train
        feature_dim, label_space = full.feature_dim, full.class_count
    else:
        train, test, edge_pool, out_pool = gen_synthetic(syn, data_seed)
        attacker_pool = gen_attacker_pool(
            syn, data_seed, pool_seed=0, per_class=spec.attack.attacker_pool_per_class
        )
        feature_dim, label_space = syn.feature_dim, syn.label_space

    plan = dirichlet_partition(
        train, exp.total_clients, spec.data.dirichlet_alpha,
        derive_seed(seed, "partition").generate_state(1)[0],
    )
    client_datasets = [plan.client_dataset(train, i) for i in range(exp.total_clients)]
    benign_test, validation = _split_validation(test, spec.data.validation_per_class)

    arch = ModelArch((feature_dim, *spec.hidden_layers, label_space))

    bspec = resolve_backdoor_spec(spec)
    backdoor_dataset = backdoor_test = None
    if bspec is not None:
        bseed = derive_seed(seed, "backdoor").generate_state(1)[0]
        backdoor_dataset = build_backdoor_dataset(
            attacker_pool, edge_pool, out_pool, bspec, bseed
        )
        backdoor_test = backdoor_test_set(
            attacker_pool, edge_pool, out_pool, bspec, spec.attack.backdoor_test_size, bseed
        )

    attack = build_attack(spec, backdoor_dataset, seed) if bspec is not None else None
    schedule = AttackSchedule(
        kind=spec.attack.schedule,
        persistent_count=spec.attack.persistent_count,
        malicious_fraction=spec.attack.malicious_client_fraction,
    )
    defense = build_defense(spec.defense)

    env = RunEnv(
        arch=arch,
        client_datasets=client_datasets,
        benign_test=benign_test,
        backdoor_test=backdoor_test,
        validation=validation,
    )
    return BuiltExperiment(exp, schedule, attack, defense, env, config_hash(spec))


@dataclass
class RunResult:
    series: MetricSeries
    records: list[RoundRecord]
    summary: SummaryReport
    elapsed: float


def run_experiment(
    spec: RunSpec, *, threads: int = 1, progress=None
) -> RunResult:
    built = build_experiment(spec)
    start = time.time()
    series, records = run_rounds(
        built.config,
        built.schedule,
        built.attack,
        built.defense,
        built.env,
        threads=threads,
        config_hash=built.hash,
        progress=progress,
    )
    elapsed = time.time() - start
    window = (built.config.attack_start, built.config.attack_end)
    summary = summarize(series, window)
    return RunResult(series, records, summary, elapsed)


def write_outputs(outdir, result: RunResult, spec: RunSpec) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    result.series.to_csv(out / "metrics.csv")
    with open(out / "summary.json", "w") as fh:
        json.dump(result.summary.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "rounds.jsonl", "w") as fh:
        for record in result.records:
            fh.write(json.dumps(record.to_json_dict()) + "\n")
    plots.write_run_plots(out, result.series)
