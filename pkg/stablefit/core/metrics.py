"""
Task metrics and stability statistics.

Task metrics: accuracy, F1, MCC (from ConfusionCounts), perplexity.
Stability statistics: std/mean/max summaries, mean-centered Levene test,
and the two run-to-run stability estimators (variance of the final metric,
and per-point Bernoulli variance of correctness).
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import betainc

from .validate import StabilityValidationError

SIGNIFICANCE_LEVEL = 0.001


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion counts (positive class = 1)."""
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise StabilityValidationError(f"confusion counts must be >= 0: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, predictions: np.ndarray, labels: np.ndarray, positive: int = 1) -> "ConfusionCounts":
        pred = np.asarray(predictions) == positive
        gold = np.asarray(labels) == positive
        return cls(
            tp=int(np.sum(pred & gold)),
            fp=int(np.sum(pred & ~gold)),
            tn=int(np.sum(~pred & ~gold)),
            fn=int(np.sum(~pred & gold)),
        )


def _require_total(counts: ConfusionCounts) -> None:
    if counts.total == 0:
        raise StabilityValidationError("metric of all-zero confusion counts")


def accuracy(counts: ConfusionCounts) -> float:
    _require_total(counts)
    return (counts.tp + counts.tn) / counts.total


def f1(counts: ConfusionCounts) -> float:
    """F1 of the positive class; 0 when 2tp + fp + fn is 0."""
    _require_total(counts)
    denom = 2 * counts.tp + counts.fp + counts.fn
    return 2 * counts.tp / denom if denom else 0.0


def mcc(counts: ConfusionCounts) -> float:
    """Matthews correlation; 0 when any marginal is empty."""
    _require_total(counts)
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def perplexity(loss: float) -> float:
    return math.exp(loss)


def task_metric(name: str, predictions: np.ndarray, labels: np.ndarray, num_classes: int = 2) -> float:
    """
    Evaluate a task metric from predicted and gold labels.

    Accuracy works for any class count; F1 and MCC are binary.

    Raises:
        StabilityValidationError: Unknown metric, empty input, or F1/MCC on
            a task with more than two classes
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise StabilityValidationError("metric over zero examples")
    if name == "accuracy":
        return float(np.mean(predictions == labels))
    if name in ("f1", "mcc"):
        if num_classes != 2:
            raise StabilityValidationError(f"{name} requires a binary task, got {num_classes} classes")
        counts = ConfusionCounts.from_predictions(predictions, labels)
        return f1(counts) if name == "f1" else mcc(counts)
    raise StabilityValidationError(f"unknown metric: {name!r}")


@dataclass(frozen=True)
class SummaryStats:
    """std is None for a single value (sample std undefined)."""
    n: int
    std: Optional[float]
    mean: float
    max: float


def sample_std(values: Sequence[float]) -> float:
    """
    Sample standard deviation (n - 1 divisor).

    Raises:
        StabilityValidationError: Fewer than two values
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise StabilityValidationError(f"std needs >= 2 values, got {arr.size}")
    return float(np.std(arr, ddof=1))


def summary_stats(values: Sequence[float]) -> SummaryStats:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise StabilityValidationError("summary of zero values")
    std = sample_std(arr) if arr.size >= 2 else None
    return SummaryStats(n=int(arr.size), std=std, mean=float(np.mean(arr)), max=float(np.max(arr)))


@dataclass(frozen=True)
class LeveneResult:
    statistic: float
    pvalue: float
    df_between: int
    df_within: int

    @property
    def significant(self) -> bool:
        return self.pvalue < SIGNIFICANCE_LEVEL


def f_sf(w: float, d1: int, d2: int) -> float:
    """Upper tail P(F > w) of F(d1, d2) via the regularized incomplete beta."""
    if math.isinf(w):
        return 0.0
    if w <= 0:
        return 1.0
    return float(betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * w)))


def levene_test(groups: Sequence[Sequence[float]]) -> LeveneResult:
    """
    Mean-centered Levene test for equal variances.

    z_ij = |x_ij - mean_i|; W is the one-way ANOVA F statistic of the z's.
    Zero within-group z spread gives W = inf, p = 0 (or W = 0, p = 1 when
    the between-group spread is zero too).

    Raises:
        StabilityValidationError: Fewer than two groups or a group of size < 2
    """
    if len(groups) < 2:
        raise StabilityValidationError(f"levene_test needs >= 2 groups, got {len(groups)}")
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    if any(a.size < 2 for a in arrays):
        raise StabilityValidationError(f"levene_test groups need >= 2 values, sizes {[a.size for a in arrays]}")

    k = len(arrays)
    n_total = int(sum(a.size for a in arrays))
    z = [np.abs(a - a.mean()) for a in arrays]
    z_means = np.array([zi.mean() for zi in z])
    z_grand = np.concatenate(z).mean()
    sizes = np.array([a.size for a in arrays], dtype=np.float64)

    if np.all(z_means == z_means[0]):
        between = 0.0
    else:
        between = float(np.sum(sizes * (z_means - z_grand) ** 2))
    within = float(sum(np.sum((zi - zm) ** 2) for zi, zm in zip(z, z_means)))

    d1, d2 = k - 1, n_total - k
    if within == 0.0:
        if between == 0.0:
            return LeveneResult(0.0, 1.0, d1, d2)
        return LeveneResult(math.inf, 0.0, d1, d2)
    w = (d2 / d1) * between / within
    return LeveneResult(w, f_sf(w, d1, d2), d1, d2)


def performance_variance_stability(run_metrics: Sequence[float]) -> float:
    """
    Sample variance of per-run dev metrics.

    Raises:
        StabilityValidationError: Fewer than two runs
    """
    arr = np.asarray(run_metrics, dtype=np.float64)
    if arr.size < 2:
        raise StabilityValidationError(f"stability needs >= 2 runs, got {arr.size}")
    return float(np.var(arr, ddof=1))


def per_point_stability(correctness: Sequence[Sequence[bool]]) -> float:
    """
    Mean over dev points of p(1 - p), p = fraction of runs correct on the point.

    Args:
        correctness: runs x points boolean matrix

    Raises:
        StabilityValidationError: Empty matrix, ragged rows, or < 2 runs
    """
    try:
        matrix = np.asarray(correctness, dtype=bool)
    except ValueError as exc:
        raise StabilityValidationError(f"correctness matrix is ragged: {exc}") from exc
    if matrix.ndim != 2 or matrix.size == 0:
        raise StabilityValidationError(f"correctness must be a non-empty runs x points matrix, got shape {matrix.shape}")
    if matrix.shape[0] < 2:
        raise StabilityValidationError(f"per-point stability needs >= 2 runs, got {matrix.shape[0]}")
    p = matrix.mean(axis=0, dtype=np.float64)
    return float(np.mean(p * (1.0 - p)))
