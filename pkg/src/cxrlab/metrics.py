"""Confusion counts, ROC/AUC, operating points and run summaries.

Threshold convention used across the package: a record is predicted abnormal
iff ``p_abnormal >= threshold``.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InfeasibleTargetError, UndefinedMetricError, ValidationError
from .records import scores_and_labels

METRIC_NAMES = ("accuracy", "auc", "sensitivity", "specificity")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    tn: int
    fp: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.tn, self.fp) < 0:
            raise ValidationError(f"negative confusion count in {self}")

    @property
    def positives(self):
        return self.tp + self.fn

    @property
    def negatives(self):
        return self.tn + self.fp


class ClassificationMetrics(NamedTuple):
    accuracy: float
    sensitivity: float
    specificity: float


@dataclass
class RocCurve:
    """ROC points ordered by threshold descending.

    The first point is (0, 0) at threshold +inf; every later point
    corresponds to one distinct score used as threshold.
    """

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "fpr", "tpr"])
            for t, f, s in zip(self.thresholds, self.fpr, self.tpr):
                writer.writerow([repr(float(t)), repr(float(f)), repr(float(s))])

    @classmethod
    def from_csv(cls, path):
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(fpr=rows[:, 1], tpr=rows[:, 2], thresholds=rows[:, 0])


@dataclass
class MetricsReport:
    accuracy: float
    auc: float | None
    sensitivity: float
    specificity: float
    threshold: float
    counts: ConfusionCounts
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["counts"] = asdict(self.counts)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["counts"] = ConfusionCounts(**d["counts"])
        return cls(**d)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def confusion_at_threshold(records, threshold):
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold must lie in [0, 1], got {threshold}")
    scores, labels = scores_and_labels(records)
    predicted = scores >= threshold
    positive = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(predicted & positive)),
        fn=int(np.sum(~predicted & positive)),
        tn=int(np.sum(~predicted & ~positive)),
        fp=int(np.sum(predicted & ~positive)),
    )


def classification_metrics(counts):
    """Sensitivity, specificity and accuracy from confusion counts.

    On balanced sets accuracy is computed as the mean of sensitivity and
    specificity so that identity holds bit-exactly; it then agrees with
    ``(TP + TN) / total`` to within one ulp.
    """
    if counts.positives == 0:
        raise UndefinedMetricError("sensitivity")
    if counts.negatives == 0:
        raise UndefinedMetricError("specificity")
    sensitivity = counts.tp / counts.positives
    specificity = counts.tn / counts.negatives
    if counts.positives == counts.negatives:
        accuracy = (sensitivity + specificity) / 2
    else:
        accuracy = (counts.tp + counts.tn) / (counts.positives + counts.negatives)
    return ClassificationMetrics(accuracy, sensitivity, specificity)


def roc_auc(records):
    """ROC curve over every distinct score plus the (0, 0) origin, and its trapezoidal area."""
    scores, labels = scores_and_labels(records)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs both classes present")

    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp_cum = np.cumsum(y == 1)
    fp_cum = np.cumsum(y == 0)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0.0, tp_cum[last] / n_pos]
    fpr = np.r_[0.0, fp_cum[last] / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds), auc


def auc_score(records):
    return roc_auc(records)[1]


class OperatingPoint(NamedTuple):
    threshold: float
    sensitivity: float
    specificity: float


def operating_point(curve, target, value):
    """Best threshold subject to ``target`` ("sensitivity" or "specificity") >= value.

    Among feasible points the other metric is maximized. Ties are broken by
    the larger constrained metric (the dominating ROC point), then by the
    higher threshold.
    """
    if target not in ("sensitivity", "specificity"):
        raise ValidationError(f"target must be 'sensitivity' or 'specificity', got {target!r}")
    if not 0.0 < value < 1.0:
        raise ValidationError(f"target value must lie in (0, 1), got {value}")
    sens = np.asarray(curve.tpr, dtype=float)
    spec = 1.0 - np.asarray(curve.fpr, dtype=float)
    constrained, other = (sens, spec) if target == "sensitivity" else (spec, sens)
    feasible = np.nonzero(constrained >= value)[0]
    if feasible.size == 0:
        best = float(constrained.max())
        raise InfeasibleTargetError(f"{target} >= {value} unreachable; best achievable is {best}", best)
    best = feasible[other[feasible] == other[feasible].max()]
    best = best[constrained[best] == constrained[best].max()]
    # points are ordered by descending threshold, so the first one has the highest threshold
    idx = best[0]
    return OperatingPoint(float(curve.thresholds[idx]), float(sens[idx]), float(spec[idx]))


def evaluate(records, threshold=0.5, metadata=None):
    """Full metrics report for one set of probability records."""
    counts = confusion_at_threshold(records, threshold)
    m = classification_metrics(counts)
    _, auc = roc_auc(records)
    return MetricsReport(
        accuracy=m.accuracy,
        auc=auc,
        sensitivity=m.sensitivity,
        specificity=m.specificity,
        threshold=threshold,
        counts=counts,
        metadata=dict(metadata or {}),
    )


class MeanSd(NamedTuple):
    mean: float
    sd: float
    n: int


def summarize_runs(reports):
    """Arithmetic mean and sample standard deviation (n - 1) of each metric.

    A single report gets sd 0. Metrics missing (None) from any report are skipped.
    """
    if len(reports) == 0:
        raise ValidationError("summarize_runs needs at least one report")
    summary = {}
    for name in METRIC_NAMES:
        values = [getattr(r, name) for r in reports]
        if any(v is None for v in values):
            continue
        n = len(values)
        mean = math.fsum(values) / n
        sd = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1)) if n > 1 else 0.0
        summary[name] = MeanSd(mean, sd, n)
    return summary


def summary_to_dict(summary):
    return {k: {"mean": v.mean, "sd": v.sd, "n": v.n} for k, v in summary.items()}


def format_summary_row(label, summary):
    """Render one table row in the percent/2-decimal style."""
    cells = [label]
    for name in METRIC_NAMES:
        if name not in summary:
            cells.append("-")
        elif name == "auc":
            cells.append(f"{summary[name].mean:.2f} ± {summary[name].sd:.2f}")
        else:
            cells.append(f"{100 * summary[name].mean:.2f} ± {100 * summary[name].sd:.2f}%")
    return cells
