"""Accuracy metrics, per-round series, and run summaries."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import DataError
from .nn import ModelArch, ParamVec, forward

CSV_COLUMNS = (
    "round",
    "back_acc",
    "ben_acc",
    "global_update_norm",
    "accepted_benign",
    "accepted_malicious",
    "region_estimate",
)


def _accuracy(model: ParamVec, arch: ModelArch, test: Dataset) -> float:
    if len(test) == 0:
        raise DataError("cannot evaluate on an empty test set")
    predicted = forward(model, arch, test.features).argmax(axis=1)
    return 100.0 * float(np.mean(predicted == test.labels))


def back_acc(model: ParamVec, arch: ModelArch, backdoor_test: Dataset) -> float:
    """Percentage of backdoor instances classified with the backdoor label."""
    return _accuracy(model, arch, backdoor_test)


def ben_acc(model: ParamVec, arch: ModelArch, benign_test: Dataset) -> float:
    """Percentage of the class-balanced benign test set classified correctly."""
    return _accuracy(model, arch, benign_test)


@dataclass
class MetricSeries:
    """One entry per completed round, plus experiment metadata."""

    back_acc: list[float]
    ben_acc: list[float]
    global_update_norm: list[float]
    accepted_benign: list[int]
    accepted_malicious: list[int]
    region_estimate: list[Optional[float]]
    config_hash: str = ""
    seed: int = 0

    def __post_init__(self):
        n = len(self.back_acc)
        fields = (
            self.ben_acc,
            self.global_update_norm,
            self.accepted_benign,
            self.accepted_malicious,
            self.region_estimate,
        )
        if any(len(f) != n for f in fields):
            raise ValueError("metric columns must have equal lengths")
        for xs in (self.back_acc, self.ben_acc):
            if any(not 0.0 <= x <= 100.0 for x in xs):
                raise ValueError("accuracies must lie in [0, 100]")

    def __len__(self) -> int:
        return len(self.back_acc)

    @classmethod
    def from_records(cls, records, config_hash: str = "", seed: int = 0) -> "MetricSeries":
        return cls(
            back_acc=[r.back_acc for r in records],
            ben_acc=[r.ben_acc for r in records],
            global_update_norm=[r.global_update_norm for r in records],
            accepted_benign=[r.accepted_benign for r in records],
            accepted_malicious=[r.accepted_malicious for r in records],
            region_estimate=[r.region_estimate for r in records],
            config_hash=config_hash,
            seed=seed,
        )

    def to_csv_text(self) -> str:
        lines = [f"# config_hash={self.config_hash} seed={self.seed}"]
        lines.append(",".join(CSV_COLUMNS))
        for i in range(len(self)):
            region = (
                "" if self.region_estimate[i] is None else repr(float(self.region_estimate[i]))
            )
            lines.append(
                f"{i},{float(self.back_acc[i])!r},{float(self.ben_acc[i])!r},"
                f"{float(self.global_update_norm[i])!r},{int(self.accepted_benign[i])},"
                f"{int(self.accepted_malicious[i])},{region}"
            )
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_csv_text())

    @classmethod
    def from_csv(cls, path) -> "MetricSeries":
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        if not lines or not lines[0].startswith("#"):
            raise DataError(f"{path}: missing metadata comment line")
        meta = dict(part.split("=", 1) for part in lines[0][1:].split())
        if lines[1] != ",".join(CSV_COLUMNS):
            raise DataError(f"{path}: unexpected header {lines[1]!r}")
        series = cls([], [], [], [], [], [], meta.get("config_hash", ""), int(meta["seed"]))
        for ln in lines[2:]:
            if not ln:
                continue
            cells = ln.split(",")
            if len(cells) != len(CSV_COLUMNS):
                raise DataError(f"{path}: bad row {ln!r}")
            series.back_acc.append(float(cells[1]))
            series.ben_acc.append(float(cells[2]))
            series.global_update_norm.append(float(cells[3]))
            series.accepted_benign.append(int(cells[4]))
            series.accepted_malicious.append(int(cells[5]))
            series.region_estimate.append(float(cells[6]) if cells[6] else None)
        return series


def longevity(series: MetricSeries, round_index: int) -> float:
    """Backdoor accuracy averaged over the five rounds centered on
    `round_index`, truncated at the series boundaries."""
    n = len(series)
    if not 0 <= round_index < n:
        raise ValueError(f"round {round_index} outside series of length {n}")
    lo = max(0, round_index - 2)
    hi = min(n, round_index + 3)
    window = series.back_acc[lo:hi]
    return float(np.mean(window))


@dataclass
class SummaryReport:
    max_acc: float
    l100: Optional[float]
    l300: Optional[float]
    l600: Optional[float]
    final_ben_acc: float
    ben_acc_drop: float
    config_hash: str
    seed: int

    def to_json_dict(self) -> dict:
        return {
            "max_acc": self.max_acc,
            "l100": self.l100,
            "l300": self.l300,
            "l600": self.l600,
            "final_ben_acc": self.final_ben_acc,
            "ben_acc_drop": self.ben_acc_drop,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }


def _mean_tail(xs: Sequence[float], end: int, width: int = 5) -> float:
    lo = max(0, end - width)
    chunk = xs[lo:end]
    return float(np.mean(chunk)) if chunk else float(xs[0])


def summarize(series: MetricSeries, attack_window: tuple[int, int]) -> SummaryReport:
    """Max backdoor accuracy, longevity at +100/+300/+600 rounds after the
    attack ends, and the benign-accuracy drop over the attack window.

    Longevity values whose target round falls outside the series are
    reported as absent (None), not zero.
    """
    start, end = attack_window
    n = len(series)
    if n == 0:
        raise ValueError("cannot summarize an empty series")

    def lev(offset: int) -> Optional[float]:
        target = end + offset
        return longevity(series, target) if target < n else None

    baseline = _mean_tail(series.ben_acc, start) if start > 0 else series.ben_acc[0]
    attack_tail = _mean_tail(series.ben_acc, min(end, n))
    return SummaryReport(
        max_acc=float(max(series.back_acc)),
        l100=lev(100),
        l300=lev(300),
        l600=lev(600),
        final_ben_acc=float(series.ben_acc[-1]),
        ben_acc_drop=float(baseline - attack_tail),
        config_hash=series.config_hash,
        seed=series.seed,
    )
