"""Classification metrics, group-level fold planning and run aggregation.

Metrics with a zero denominator raise :class:`UndefinedMetricError` instead
of returning 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np

from protomoco import rng as rngmod


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError(f"counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @classmethod
    def from_predictions(cls, predicted: Sequence[int], truth: Sequence[int], positive: int = 1
                         ) -> "ConfusionCounts":
        p = np.asarray(predicted) == positive
        t = np.asarray(truth) == positive
        return cls(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & ~t)), int(np.sum(~p & t)))


@dataclass(frozen=True)
class ScoredSample:
    score: float
    truth: bool

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score}")


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise UndefinedMetricError("accuracy of zero scored samples")
    return (c.tp + c.tn) / c.total


def precision(c: ConfusionCounts) -> float:
    if c.tp + c.fp == 0:
        raise UndefinedMetricError("precision with no predicted positives")
    return c.tp / (c.tp + c.fp)


def recall(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("recall with no positive samples")
    return c.tp / (c.tp + c.fn)


def roc_auc(samples: Sequence[ScoredSample]) -> float:
    """Trapezoidal area under the ROC curve.

    Thresholds sweep the distinct scores from high to low, so tied scores
    move TPR and FPR together and contribute half credit, matching the
    Mann-Whitney statistic.
    """
    scores = np.array([s.score for s in samples], dtype=np.float64)
    truth = np.array([bool(s.truth) for s in samples])
    n_pos, n_neg = int(truth.sum()), int((~truth).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs at least one positive and one negative sample")
    order = np.argsort(-scores, kind="mergesort")
    scores, truth = scores[order], truth[order]
    # last index of each run of equal scores
    cut = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    tps = np.cumsum(truth)[cut]
    fps = np.cumsum(~truth)[cut]
    tpr = np.r_[0, tps] / n_pos
    fpr = np.r_[0, fps] / n_neg
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict[Hashable, int]

    def groups_in(self, fold: int) -> list[Hashable]:
        return [g for g, f in self.assignment.items() if f == fold]

    def sizes(self) -> list[int]:
        counts = [0] * self.k
        for f in self.assignment.values():
            counts[f] += 1
        return counts


def plan_group_kfold(groups: Sequence[Hashable], k: int, seed: int,
                     strata: Mapping[Hashable, Hashable] | None = None) -> FoldPlan:
    """Shuffle the distinct groups and deal them round-robin into ``k`` folds.

    With ``strata`` (group -> stratum, e.g. its class) the shuffled groups
    are dealt stratum by stratum, continuing the round-robin, so every
    stratum spreads evenly over the folds.
    """
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    distinct = sorted(set(groups), key=str)
    if len(distinct) < k:
        raise ValueError(f"{len(distinct)} distinct groups cannot fill {k} folds")
    shuffled = [distinct[i] for i in rngmod.stream(seed, "kfold").permutation(len(distinct))]
    if strata is not None:
        keys = sorted({strata[g] for g in shuffled}, key=str)
        shuffled = [g for key in keys for g in shuffled if strata[g] == key]
    return FoldPlan(k, {g: i % k for i, g in enumerate(shuffled)})


def aggregate(runs: Sequence[float]) -> tuple[float, float]:
    """Mean and Bessel-corrected standard deviation."""
    if len(runs) < 2:
        raise UndefinedMetricError(f"standard deviation needs at least 2 runs, got {len(runs)}")
    values = np.asarray(runs, dtype=np.float64)
    return float(values.mean()), float(values.std(ddof=1))
