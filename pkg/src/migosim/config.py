"""Experiment configuration: TOML schema, validation, and hashing.

A config file holds up to four tables (experiment, data, attack, defense).
Every key has a default; unknown tables or keys are rejected with a
diagnostic naming them. The config hash covers every semantically
meaningful resolved field except the seed, which is reported separately so
that seed sweeps of one configuration share a hash.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .engine import AttackSchedule, ExperimentConfig
from .errors import ConfigurationError


class ConfigFileError(ConfigurationError):
    """A config file problem, carrying the table/key it points at."""

    def __init__(self, message: str, table: str = "", key: str = ""):
        self.table = table
        self.key = key
        where = f"[{table}]" + (f" {key}" if key else "") if table else ""
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class DataConfig:
    classes: int = 10
    feature_dim: int = 8
    samples_per_class: int = 200
    test_per_class: int = 50
    cluster_spread: float = 0.6
    class_separation: float = 5.0
    dirichlet_alpha: float = 0.9
    edge_subpop_fraction: float = 0.0
    edge_parent_class: int = 0
    validation_per_class: int = 10
    csv: Optional[str] = None


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"  # none | migo | backpgd | mrepl | neurotoxin
    schedule: str = "persistent"  # persistent | random
    persistent_count: int = 1
    malicious_client_fraction: float = 0.01
    backdoor: str = "edge"  # in | edge | out
    target_class: int = 0
    true_label: Optional[int] = None  # defaults to the edge parent class
    out_class: Optional[int] = None  # defaults to `classes`
    backdoor_label: Optional[int] = None  # defaults to classes - 1
    dataset_size: int = 512
    poison_fraction: float = 0.4
    backdoor_test_size: int = 100
    attacker_pool_per_class: int = 512
    # migo knobs
    esr: Optional[float] = 3.0
    mpr: object = 0.3  # a number (static), "adaptive", or "none"
    beta: float = 2.0
    beta_schedule: Optional[tuple[tuple[int, float], ...]] = None
    alpha: float = 0.5
    r_default: float = 0.5
    layer_force: bool = False
    forced_layers: tuple[int, ...] = (-1,)
    benign_epochs: int = 2
    finetune_batches: int = 5
    # esr/mpr accept a number, or "none" to disable the region.
    # The attacker searches more aggressively than benign clients and relies
    # on the regions for containment.
    attacker_epochs: Optional[int] = 4
    attacker_lr: Optional[float] = 0.4
    # baselines
    projection_radius: Optional[float] = None
    boost_factor: float = 3.0
    mask_fraction: float = 0.95


@dataclass(frozen=True)
class DefenseConfig:
    name: str = "none"
    tau: float = 0.2
    sigma: float = 1e-3
    f: int = 3
    m: int = 5
    theta: float = 0.15
    rho: float = 0.25
    lipc_lambda: float = 0.116
    trim_fraction: float = 0.2
    flame_sigma: float = 1e-3


@dataclass(frozen=True)
class RunSpec:
    experiment: ExperimentConfig
    data: DataConfig
    attack: AttackConfig
    defense: DefenseConfig
    hidden_layers: tuple[int, ...] = (32,)


_EXPERIMENT_KEYS = {
    "total_clients": int,
    "clients_per_round": int,
    "total_rounds": int,
    "attack_start": int,
    "attack_end": int,
    "global_lr": float,
    "local_epochs": int,
    "local_lr": float,
    "local_batch_size": int,
    "mode": str,
    "seed": int,
    "hidden_layers": list,
}

_DATA_KEYS = {
    "classes": int,
    "feature_dim": int,
    "samples_per_class": int,
    "test_per_class": int,
    "cluster_spread": float,
    "class_separation": float,
    "dirichlet_alpha": float,
    "edge_subpop_fraction": float,
    "edge_parent_class": int,
    "validation_per_class": int,
    "csv": str,
}

_ATTACK_KEYS = {
    "kind": str,
    "schedule": str,
    "persistent_count": int,
    "malicious_client_fraction": float,
    "backdoor": str,
    "target_class": int,
    "true_label": int,
    "out_class": int,
    "backdoor_label": int,
    "dataset_size": int,
    "poison_fraction": float,
    "backdoor_test_size": int,
    "attacker_pool_per_class": int,
    "esr": (float, str, type(None)),
    "mpr": (str, float, int),
    "beta": float,
    "beta_schedule": list,
    "alpha": float,
    "r_default": float,
    "layer_force": bool,
    "forced_layers": list,
    "benign_epochs": int,
    "finetune_batches": int,
    "attacker_epochs": int,
    "attacker_lr": float,
    "projection_radius": float,
    "boost_factor": float,
    "mask_fraction": float,
}

_DEFENSE_KEYS = {
    "name": str,
    "tau": float,
    "sigma": float,
    "f": int,
    "m": int,
    "theta": float,
    "rho": float,
    "lipc_lambda": float,
    "trim_fraction": float,
    "flame_sigma": float,
}

ATTACK_KINDS = ("none", "migo", "backpgd", "mrepl", "neurotoxin")
DEFENSE_NAMES = (
    "none",
    "norm_clip",
    "nc_noise",
    "krum",
    "mkrum",
    "foolsgold",
    "flame",
    "freqfed",
    "flshield",
    "median",
    "trimmed_mean",
)


def _check_keys(table: str, raw: dict, known: dict) -> None:
    for key in raw:
        if key not in known:
            raise ConfigFileError(f"unknown key (known: {', '.join(sorted(known))})", table, key)


def _coerce(table: str, key: str, value, want) -> Any:
    kinds = want if isinstance(want, tuple) else (want,)
    if value is None and type(None) in kinds:
        return None
    if float in kinds and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, tuple(k for k in kinds if k is not type(None))):
        names = "/".join(getattr(k, "__name__", str(k)) for k in kinds)
        raise ConfigFileError(f"expected {names}, got {type(value).__name__}", table, key)
    return value


def _take(table: str, raw: dict, known: dict) -> dict:
    _check_keys(table, raw, known)
    return {k: _coerce(table, k, v, known[k]) for k, v in raw.items()}


def parse_config_dict(doc: dict) -> RunSpec:
    for table in doc:
        if table not in ("experiment", "data", "attack", "defense"):
            raise ConfigFileError(
                "unknown table (known: experiment, data, attack, defense)", table
            )
        if not isinstance(doc[table], dict):
            raise ConfigFileError("must be a table", table)

    exp_raw = _take("experiment", doc.get("experiment", {}), _EXPERIMENT_KEYS)
    hidden = tuple(exp_raw.pop("hidden_layers", (32,)))
    if not hidden or any(not isinstance(h, int) or h < 1 for h in hidden):
        raise ConfigFileError("must be a list of positive ints", "experiment", "hidden_layers")
    try:
        experiment = ExperimentConfig(**exp_raw)
    except ConfigurationError as exc:
        raise ConfigFileError(str(exc), "experiment") from None

    data_raw = _take("data", doc.get("data", {}), _DATA_KEYS)
    data = DataConfig(**data_raw)
    if data.classes < 2 or data.cluster_spread <= 0:
        raise ConfigFileError("need classes >= 2 and cluster_spread > 0", "data")

    attack_raw = _take("attack", doc.get("attack", {}), _ATTACK_KEYS)
    if "beta_schedule" in attack_raw:
        try:
            attack_raw["beta_schedule"] = tuple(
                (int(r), float(b)) for r, b in attack_raw["beta_schedule"]
            )
        except (TypeError, ValueError):
            raise ConfigFileError(
                "must be a list of [round, beta] pairs", "attack", "beta_schedule"
            ) from None
    if "forced_layers" in attack_raw:
        attack_raw["forced_layers"] = tuple(int(v) for v in attack_raw["forced_layers"])
    attack = AttackConfig(**attack_raw)
    if attack.kind not in ATTACK_KINDS:
        raise ConfigFileError(f"must be one of {ATTACK_KINDS}", "attack", "kind")
    if attack.backdoor not in ("in", "edge", "out"):
        raise ConfigFileError("must be in/edge/out", "attack", "backdoor")
    if attack.schedule not in ("persistent", "random"):
        raise ConfigFileError("must be persistent/random", "attack", "schedule")
    if isinstance(attack.mpr, str) and attack.mpr not in ("adaptive", "none"):
        raise ConfigFileError(
            'must be "adaptive", "none", or a number', "attack", "mpr"
        )
    if isinstance(attack.esr, str):
        if attack.esr != "none":
            raise ConfigFileError('must be a number or "none"', "attack", "esr")
        attack = dataclasses.replace(attack, esr=None)

    defense_raw = _take("defense", doc.get("defense", {}), _DEFENSE_KEYS)
    defense = DefenseConfig(**defense_raw)
    if defense.name not in DEFENSE_NAMES:
        raise ConfigFileError(f"must be one of {DEFENSE_NAMES}", "defense", "name")

    return RunSpec(experiment, data, attack, defense, hidden)


def parse_config(path) -> RunSpec:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigFileError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigFileError(f"{path}: {exc}") from None
    return parse_config_dict(doc)


def config_hash(spec: RunSpec) -> str:
    """Hash of the resolved config, excluding the seed."""
    payload = dataclasses.asdict(spec)
    payload["experiment"].pop("seed")
    canon = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def with_overrides(
    spec: RunSpec, seed: Optional[int] = None, rounds: Optional[int] = None
) -> RunSpec:
    exp = spec.experiment
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if rounds is not None:
        changes["total_rounds"] = rounds
        if exp.attack_end > rounds:
            changes["attack_end"] = rounds
            changes["attack_start"] = min(exp.attack_start, rounds)
    if changes:
        spec = dataclasses.replace(spec, experiment=dataclasses.replace(exp, **changes))
    return spec
