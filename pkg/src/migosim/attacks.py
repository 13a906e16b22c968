"""Malicious-client strategies.

MIGO trains on a poisoned dataset while constraining the search to an L2
ball around the global model (the search region) and projecting the final
local model into a tighter submission ball (the projection region), whose
radius can be estimated adaptively from the trend of global-model update
magnitudes. Layer forcing additionally pins selected layers of the
malicious models to benign-trained values. Three baselines are provided:
ball-projected PGD, boosted model replacement, and bottom-k coordinate
masking.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset
from .engine import LocalTrainParams, UpdateBundle, make_bundle
from .errors import ConfigurationError
from .nn import ModelArch, ParamVec, project_to_ball, sgd_train
from .seeds import derive_seed


@dataclass(frozen=True)
class LayerForcingConfig:
    """Pin `selected_layers` (indices into the layer map, negatives allowed)
    of every malicious model to benign-trained values."""

    selected_layers: tuple[int, ...] = (-1,)
    benign_epochs: int = 2
    finetune_batches: int = 5

    def __post_init__(self):
        if not self.selected_layers:
            raise ConfigurationError("layer forcing needs at least one layer")
        if self.benign_epochs < 1 or self.finetune_batches < 0:
            raise ConfigurationError("benign_epochs >= 1 and finetune_batches >= 0")


@dataclass(frozen=True)
class MigoConfig:
    """Region sizes and estimator knobs.

    esr=None disables the per-batch search constraint; mpr_mode "none"
    disables the submission projection ("no region" mode). The projection
    ball should not exceed the search ball; a static violation is allowed
    but warned about.
    """

    esr: Optional[float] = 3.0
    mpr_mode: str = "adaptive"  # "static" | "adaptive" | "none"
    mpr_value: float = 0.3
    beta: float = 2.0
    beta_schedule: Optional[tuple[tuple[int, float], ...]] = None
    alpha: float = 0.5
    r_default: float = 0.5
    layer_forcing: Optional[LayerForcingConfig] = None
    epochs: Optional[int] = None  # None: use the benign local params
    lr: Optional[float] = None
    batch_size: Optional[int] = None

    def __post_init__(self):
        if self.mpr_mode not in ("static", "adaptive", "none"):
            raise ConfigurationError(f"unknown mpr_mode {self.mpr_mode!r}")
        if self.esr is not None and self.esr < 0:
            raise ConfigurationError("esr must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must be in (0, 1)")
        if self.beta <= 0 or self.r_default <= 0:
            raise ConfigurationError("beta and r_default must be positive")
        if (
            self.esr is not None
            and self.mpr_mode == "static"
            and self.mpr_value > self.esr
        ):
            warnings.warn(
                f"projection region {self.mpr_value} exceeds search region "
                f"{self.esr}; the submission ball should sit inside the search ball",
                stacklevel=2,
            )
        if self.beta_schedule is not None:
            rounds = [r for r, _ in self.beta_schedule]
            if rounds != sorted(rounds):
                raise ConfigurationError("beta_schedule rounds must be ascending")

    def beta_at(self, round_index: Optional[int]) -> float:
        if self.beta_schedule is None or round_index is None:
            return self.beta
        current = self.beta
        for start, value in self.beta_schedule:
            if round_index >= start:
                current = value
        return current


@dataclass
class RegionEstimatorState:
    """Rolling observations fueling the adaptive region estimate:
    one attacker-norm entry per attack round, one global-delta norm per
    observed round, one Best entry per computed estimate."""

    best_history: list[float] = field(default_factory=list)
    attacker_norm_history: list[float] = field(default_factory=list)
    global_norm_history: list[float] = field(default_factory=list)


def estimate_region(
    state: RegionEstimatorState, cfg: MigoConfig, round_index: Optional[int] = None
) -> float:
    """Adaptive submission-region radius.

    Needs at least two recorded attack rounds (and two global deltas);
    before that it falls back to the default radius. Otherwise the estimate
    is a rolling average of the global update magnitude, corrected by the
    joint trend of global and attacker update magnitudes over the last two
    rounds, and scaled by beta. The first computed estimate seeds the
    previous Best with r_default/beta.
    """
    beta = cfg.beta_at(round_index)
    a_hist = state.attacker_norm_history
    g_hist = state.global_norm_history
    if len(a_hist) < 2 or len(g_hist) < 2:
        return cfg.r_default

    a_last, a_prev = a_hist[-1], a_hist[-2]
    gu_last, gu_prev = g_hist[-1], g_hist[-2]
    prev_best = state.best_history[-1] if state.best_history else cfg.r_default / beta

    tentative = cfg.alpha * prev_best + (1.0 - cfg.alpha) * gu_last
    pick = min if a_last >= gu_last else max
    if gu_last >= gu_prev:
        if a_last <= a_prev:
            best = pick(tentative, gu_last)
        else:
            best = pick(prev_best, gu_last)  # hold the rolling average
    else:
        if a_last >= a_prev:
            best = pick(tentative, gu_last)
        else:
            best = pick(prev_best, gu_last)  # hold the rolling average
    state.best_history.append(best)
    return beta * best


def _resolve_local(cfg: MigoConfig, local: LocalTrainParams) -> LocalTrainParams:
    return LocalTrainParams(
        epochs=cfg.epochs if cfg.epochs is not None else local.epochs,
        lr=cfg.lr if cfg.lr is not None else local.lr,
        batch_size=cfg.batch_size if cfg.batch_size is not None else local.batch_size,
    )


def migo_local_train(
    global_model: ParamVec,
    arch: ModelArch,
    backdoor_dataset: Dataset,
    cfg: MigoConfig,
    region: Optional[float],
    local: LocalTrainParams,
    seed,
    client_id: int,
) -> UpdateBundle:
    """One attacker's round: SGD on the poisoned dataset with per-batch
    projection into the search ball, then projection of the final model into
    the submission ball of radius `region` (None disables it)."""
    hook = None
    if cfg.esr is not None:
        esr = cfg.esr
        hook = lambda m: project_to_ball(m, global_model, esr)
    trained = sgd_train(
        global_model,
        arch,
        backdoor_dataset,
        epochs=local.epochs,
        lr=local.lr,
        batch_size=local.batch_size,
        seed=seed,
        per_batch_hook=hook,
    )
    if region is not None:
        trained = project_to_ball(trained, global_model, region)
    return make_bundle(client_id, trained - global_model, True)


def _layer_mask(arch: ModelArch, selected_layers) -> np.ndarray:
    blocks = arch.layer_blocks()
    mask = np.zeros(arch.param_count, dtype=bool)
    for li in selected_layers:
        if not -len(blocks) <= li < len(blocks):
            raise ConfigurationError(
                f"unknown layer {li}; model has {len(blocks)} layers"
            )
        span = blocks[li].span
        mask[span[0] : span[1]] = True
    return mask


def project_with_frozen(
    m: ParamVec, center: ParamVec, radius: float, frozen: np.ndarray
) -> ParamVec:
    """Project into the ball around `center` while keeping the frozen
    coordinates exactly as they are: only the free coordinates are scaled.
    If the frozen block alone exceeds the radius, the free part collapses to
    the center (the bound then cannot be met without touching frozen values).
    """
    diff = m.values - center.values
    if np.linalg.norm(diff) <= radius:
        return m
    frozen_sq = float(np.sum(diff[frozen] ** 2))
    free = diff[~frozen]
    free_sq = float(np.sum(free**2))
    budget = radius * radius - frozen_sq
    scale = 0.0 if budget <= 0 or free_sq == 0 else np.sqrt(budget / free_sq)
    out = center.values.copy()
    out[frozen] = m.values[frozen]
    out[~frozen] += free * scale
    return ParamVec(out, m.layer_map)


def layer_force(
    global_model: ParamVec,
    arch: ModelArch,
    cohort: list[tuple[int, Dataset]],
    cfg: MigoConfig,
    backdoor_dataset: Dataset,
    region: Optional[float],
    local: LocalTrainParams,
    base_seed: int,
    round_index: int,
) -> list[UpdateBundle]:
    """Coordinated layer-forced round for every attacker in the cohort.

    1) Each attacker trains a benign-style model on its own data and saves
       the selected layers. 2) The lowest-id attacker trains the shared
       malicious model on the poisoned data with those layers pinned to its
       own benign values. 3) Every attacker takes the shared model, swaps in
       its own benign layers, fine-tunes a few batches with them frozen, and
       projects into the submission ball without touching the frozen block.
    """
    lf = cfg.layer_forcing
    mask = _layer_mask(arch, lf.selected_layers)
    esr = cfg.esr

    def freeze_hook(anchor_values: np.ndarray):
        def hook(m: ParamVec) -> ParamVec:
            if esr is not None:
                m = project_to_ball(m, global_model, esr)
            out = m.values.copy()
            out[mask] = anchor_values[mask]
            return ParamVec(out, m.layer_map)

        return hook

    benign_models: dict[int, ParamVec] = {}
    for cid, benign_data in cohort:
        benign_models[cid] = sgd_train(
            global_model,
            arch,
            benign_data,
            epochs=lf.benign_epochs,
            lr=local.lr,
            batch_size=local.batch_size,
            seed=derive_seed(base_seed, "lf-benign", round_index, cid),
        )

    leader = min(cid for cid, _ in cohort)
    anchor = benign_models[leader]
    start = anchor.copy()
    start.values[mask] = anchor.values[mask]
    shared = sgd_train(
        start,
        arch,
        backdoor_dataset,
        epochs=local.epochs,
        lr=local.lr,
        batch_size=local.batch_size,
        seed=derive_seed(base_seed, "lf-shared", round_index),
        per_batch_hook=freeze_hook(anchor.values),
    )

    bundles = []
    for cid, _ in cohort:
        own = benign_models[cid]
        model = shared.copy()
        model.values[mask] = own.values[mask]
        if lf.finetune_batches > 0:
            model = sgd_train(
                model,
                arch,
                backdoor_dataset,
                epochs=1,
                lr=local.lr,
                batch_size=local.batch_size,
                seed=derive_seed(base_seed, "lf-tune", round_index, cid),
                per_batch_hook=freeze_hook(own.values),
                max_batches=lf.finetune_batches,
            )
        if region is not None:
            model = project_with_frozen(model, global_model, region, mask)
        bundles.append(make_bundle(cid, model - global_model, True))
    return bundles


class MigoAttack:
    """Pluggable strategy object driving migo_local_train / layer_force."""

    name = "migo"

    def __init__(self, cfg: MigoConfig, backdoor_dataset: Dataset, seed: int):
        self.cfg = cfg
        self.dataset = backdoor_dataset
        self.seed = int(seed)
        self.state = RegionEstimatorState()

    def current_region(self, round_index: int) -> Optional[float]:
        if self.cfg.mpr_mode == "static":
            return self.cfg.mpr_value
        if self.cfg.mpr_mode == "adaptive":
            return estimate_region(self.state, self.cfg, round_index)
        return None

    def round_updates(self, round_index, global_model, arch, cohort, local):
        region = self.current_region(round_index)
        attacker_local = _resolve_local(self.cfg, local)
        if self.cfg.layer_forcing is not None:
            bundles = layer_force(
                global_model,
                arch,
                cohort,
                self.cfg,
                self.dataset,
                region,
                attacker_local,
                self.seed,
                round_index,
            )
        else:
            bundles = [
                migo_local_train(
                    global_model,
                    arch,
                    self.dataset,
                    self.cfg,
                    region,
                    attacker_local,
                    derive_seed(self.seed, "migo", round_index, cid),
                    cid,
                )
                for cid, _ in cohort
            ]
        return bundles, region

    def observe_round(self, round_index, global_delta: ParamVec, own_mean_norm):
        self.state.global_norm_history.append(global_delta.norm())
        if own_mean_norm is not None:
            self.state.attacker_norm_history.append(float(own_mean_norm))


@dataclass(frozen=True)
class BaselineConfig:
    """Knobs for the three baseline strategies."""

    kind: str  # "backpgd" | "mrepl" | "neurotoxin"
    projection_radius: Optional[float] = None  # backpgd; None = adaptive estimate
    boost_factor: float = 3.0  # mrepl
    mask_fraction: float = 0.95  # neurotoxin, in (0, 1]
    alpha: float = 0.5
    r_default: float = 0.5

    def __post_init__(self):
        if self.kind not in ("backpgd", "mrepl", "neurotoxin"):
            raise ConfigurationError(f"unknown baseline kind {self.kind!r}")
        if self.boost_factor < 1.0:
            raise ConfigurationError("boost_factor must be >= 1")
        if not 0.0 < self.mask_fraction <= 1.0:
            raise ConfigurationError("mask_fraction must be in (0, 1]")
        if self.projection_radius is not None and self.projection_radius < 0:
            raise ConfigurationError("projection_radius must be >= 0")


def backpgd_local_train(
    global_model: ParamVec,
    arch: ModelArch,
    backdoor_dataset: Dataset,
    radius: float,
    local: LocalTrainParams,
    seed,
    client_id: int,
) -> UpdateBundle:
    """Projected gradient descent: every batch step is projected back into
    the ball of `radius` around the global model. No separate end-of-round
    projection is applied (the last step already ends inside the ball)."""
    hook = lambda m: project_to_ball(m, global_model, radius)
    trained = sgd_train(
        global_model,
        arch,
        backdoor_dataset,
        epochs=local.epochs,
        lr=local.lr,
        batch_size=local.batch_size,
        seed=seed,
        per_batch_hook=hook,
    )
    return make_bundle(client_id, trained - global_model, True)


def mrepl_local_train(
    global_model: ParamVec,
    arch: ModelArch,
    backdoor_dataset: Dataset,
    boost_factor: float,
    local: LocalTrainParams,
    seed,
    client_id: int,
) -> UpdateBundle:
    """Boosted model replacement: train unconstrained, submit boost * (X - G).
    With boost = n / global_lr and all other updates zero, aggregation swaps
    the global model for X outright."""
    trained = sgd_train(
        global_model,
        arch,
        backdoor_dataset,
        epochs=local.epochs,
        lr=local.lr,
        batch_size=local.batch_size,
        seed=seed,
    )
    return make_bundle(client_id, boost_factor * (trained - global_model), True)


def bottom_k_mask(delta_values: np.ndarray, fraction: float) -> np.ndarray:
    """Boolean mask of the `fraction` of coordinates with smallest |delta|.
    Ties resolve by index via a stable sort."""
    d = delta_values.size
    count = d if fraction >= 1.0 else max(1, int(fraction * d))
    order = np.argsort(np.abs(delta_values), kind="stable")
    mask = np.zeros(d, dtype=bool)
    mask[order[:count]] = True
    return mask


def neurotoxin_local_train(
    global_model: ParamVec,
    arch: ModelArch,
    backdoor_dataset: Dataset,
    mask_fraction: float,
    last_global_delta: Optional[ParamVec],
    local: LocalTrainParams,
    seed,
    client_id: int,
) -> UpdateBundle:
    """Constrain the malicious update to the coordinates where the previous
    global update was smallest: after every batch step the other coordinates
    are reset to the global model's values, so the returned update's support
    is contained in the mask. Without a previous delta (or fraction 1.0) the
    training is unconstrained."""
    hook = None
    if last_global_delta is not None and mask_fraction < 1.0:
        mask = bottom_k_mask(last_global_delta.values, mask_fraction)

        def hook(m: ParamVec) -> ParamVec:
            out = global_model.values.copy()
            out[mask] = m.values[mask]
            return ParamVec(out, m.layer_map)

    trained = sgd_train(
        global_model,
        arch,
        backdoor_dataset,
        epochs=local.epochs,
        lr=local.lr,
        batch_size=local.batch_size,
        seed=seed,
        per_batch_hook=hook,
    )
    return make_bundle(client_id, trained - global_model, True)


class BaselineAttack:
    """Strategy wrapper for the backpgd / mrepl / neurotoxin baselines."""

    def __init__(self, cfg: BaselineConfig, backdoor_dataset: Dataset, seed: int):
        self.cfg = cfg
        self.name = cfg.kind
        self.dataset = backdoor_dataset
        self.seed = int(seed)
        self.state = RegionEstimatorState()
        self._last_delta: Optional[ParamVec] = None
        # backpgd tracks the benign region with an unscaled estimate
        self._estimator_cfg = MigoConfig(
            esr=None,
            mpr_mode="adaptive",
            beta=1.0,
            alpha=cfg.alpha,
            r_default=cfg.r_default,
        )

    def round_updates(self, round_index, global_model, arch, cohort, local):
        region = None
        bundles = []
        if self.cfg.kind == "backpgd":
            if self.cfg.projection_radius is not None:
                region = self.cfg.projection_radius
            else:
                region = estimate_region(self.state, self._estimator_cfg, round_index)
            for cid, _ in cohort:
                bundles.append(
                    backpgd_local_train(
                        global_model,
                        arch,
                        self.dataset,
                        region,
                        local,
                        derive_seed(self.seed, "backpgd", round_index, cid),
                        cid,
                    )
                )
        elif self.cfg.kind == "mrepl":
            for cid, _ in cohort:
                bundles.append(
                    mrepl_local_train(
                        global_model,
                        arch,
                        self.dataset,
                        self.cfg.boost_factor,
                        local,
                        derive_seed(self.seed, "mrepl", round_index, cid),
                        cid,
                    )
                )
        else:
            for cid, _ in cohort:
                bundles.append(
                    neurotoxin_local_train(
                        global_model,
                        arch,
                        self.dataset,
                        self.cfg.mask_fraction,
                        self._last_delta,
                        local,
                        derive_seed(self.seed, "neurotoxin", round_index, cid),
                        cid,
                    )
                )
        return bundles, region

    def observe_round(self, round_index, global_delta: ParamVec, own_mean_norm):
        self.state.global_norm_history.append(global_delta.norm())
        if own_mean_norm is not None:
            self.state.attacker_norm_history.append(float(own_mean_norm))
        self._last_delta = global_delta
