"""Recombination of sub-class predictions, classification metrics, and summaries.

Probabilities predicted over sub-labels are folded back onto parent classes
by summing sibling mass. Reports use macro averaging throughout, with F1
taken as the harmonic mean of macro precision and macro recall, and
zero-denominator cases resolved to 0 rather than NaN.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from clogcd.decomposition import GranularityLevel
from clogcd.errors import ClogcdError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C), rows = true class, columns = predicted

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ClogcdError(f"confusion matrix must be square, got shape {counts.shape}")
        if np.any(counts < 0):
            raise ClogcdError("confusion matrix counts must be non-negative")
        self.counts = counts.astype(np.int64)

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_sums(self) -> np.ndarray:
        """Per-class support of the evaluated split."""
        return self.counts.sum(axis=1)


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def as_dict(self) -> dict[str, float]:
        return {"acc": self.accuracy, "pr": self.precision,
                "re": self.recall, "f1": self.f1}


@dataclass
class EvaluationRecord:
    pass_index: int
    direction: str  # "desc", "asc", or "none" for single-stage runs
    end_level: int
    split: str  # "val" or "test"
    report: MetricsReport
    matrix: ConfusionMatrix


@dataclass
class ConfidenceInterval:
    lower: float
    upper: float
    level: float = 0.95
    method: str = "percentile-bootstrap"

    def __post_init__(self):
        if self.lower > self.upper:
            raise ClogcdError(f"CI lower {self.lower} exceeds upper {self.upper}")


# ---------------------------------------------------------------------------
# recombination
# ---------------------------------------------------------------------------

def recombine(proba: np.ndarray, level: GranularityLevel,
              class_count: int | None = None) -> np.ndarray:
    """Fold a sub-label probability vector onto parent classes by summing."""
    proba = np.asarray(proba, dtype=np.float64)
    if proba.shape != (level.sublabel_count,):
        raise ClogcdError(f"expected {level.sublabel_count} sub-label probabilities, "
                          f"got shape {proba.shape}")
    if class_count is None:
        class_count = max(level.parent_map) + 1
    out = np.zeros(class_count)
    np.add.at(out, level.parent_map, proba)
    return out


def recombine_batch(probas: np.ndarray, level: GranularityLevel,
                    class_count: int | None = None) -> np.ndarray:
    """(N, sub-labels) probabilities -> (N, classes)."""
    probas = np.asarray(probas, dtype=np.float64)
    if probas.ndim != 2 or probas.shape[1] != level.sublabel_count:
        raise ClogcdError(f"expected (N, {level.sublabel_count}) probabilities, "
                          f"got shape {probas.shape}")
    if class_count is None:
        class_count = max(level.parent_map) + 1
    return probas @ level.membership_matrix(class_count)


# ---------------------------------------------------------------------------
# confusion and metrics
# ---------------------------------------------------------------------------

def confusion(preds, truth, class_count: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise ClogcdError(f"preds and truth lengths differ: {len(preds)} vs {len(truth)}")
    for name, arr in (("pred", preds), ("true", truth)):
        if len(arr) and (arr.min() < 0 or arr.max() >= class_count):
            raise ClogcdError(f"{name} label out of range 0..{class_count - 1}")
    counts = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(counts, (truth, preds), 1)
    return ConfusionMatrix(counts)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    counts = cm.counts
    total = cm.total
    if total == 0:
        raise ClogcdError("cannot compute metrics on an empty confusion matrix")
    tp = np.diag(counts).astype(np.float64)
    predicted = counts.sum(axis=0).astype(np.float64)
    actual = counts.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        per_class_p = np.where(predicted > 0, tp / predicted, 0.0)
        per_class_r = np.where(actual > 0, tp / actual, 0.0)
    macro_p = float(per_class_p.mean())
    macro_r = float(per_class_r.mean())
    denom = macro_p + macro_r
    f1 = 2.0 * macro_p * macro_r / denom if denom > 0 else 0.0
    return MetricsReport(accuracy=float(tp.sum() / total), precision=macro_p,
                         recall=macro_r, f1=f1)


def evaluate_split(preds, truth, class_count: int) -> tuple[MetricsReport, ConfusionMatrix]:
    cm = confusion(preds, truth, class_count)
    return metrics(cm), cm


# ---------------------------------------------------------------------------
# confidence intervals and fitted curves
# ---------------------------------------------------------------------------

def confidence_interval(values, level: float = 0.95, resamples: int = 10000,
                        seed: int = 0) -> ConfidenceInterval:
    """Percentile bootstrap interval for the mean of a metric sequence."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or len(values) < 2:
        raise ClogcdError(f"confidence interval needs >= 2 values, got {values.shape}")
    if not 0 < level < 1:
        raise ClogcdError(f"confidence level must lie in (0, 1), got {level}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(values), size=(resamples, len(values)))
    means = values[idx].mean(axis=1)
    tail = 100.0 * (1.0 - level) / 2.0
    lower, upper = np.percentile(means, [tail, 100.0 - tail])
    return ConfidenceInterval(lower=float(lower), upper=float(upper), level=level)


def polyfit_curve(values, degree: int = 3, x=None) -> np.ndarray:
    """Least-squares polynomial fit; coefficients in increasing-power order.

    x defaults to 1-based pass indices.
    """
    y = np.asarray(values, dtype=np.float64)
    if len(y) < degree + 1:
        raise ClogcdError(f"degree-{degree} fit needs >= {degree + 1} points, got {len(y)}")
    if x is None:
        x = np.arange(1, len(y) + 1, dtype=np.float64)
    else:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != y.shape:
            raise ClogcdError("x and values must have the same length")
    return np.polynomial.polynomial.polyfit(x, y, degree)


def curve_points(coeffs: np.ndarray, x) -> np.ndarray:
    """Evaluate fitted-curve coefficients at the given x positions."""
    return np.polynomial.polynomial.polyval(np.asarray(x, dtype=np.float64),
                                            np.asarray(coeffs, dtype=np.float64))


METRICS_CSV_HEADER = "run_id,strategy,pass,direction,end_level,split,acc,pr,re,f1"


def record_csv_row(run_id: str, strategy: str, record: EvaluationRecord) -> str:
    r = record.report
    return (f"{run_id},{strategy},{record.pass_index},{record.direction},"
            f"{record.end_level},{record.split},"
            f"{r.accuracy:.6f},{r.precision:.6f},{r.recall:.6f},{r.f1:.6f}")
