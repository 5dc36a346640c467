"""Unweighted probability-averaging ensembles and exhaustive subset studies.

Subsets are streamed in batches: the member probabilities of a batch are
summed in pool order, thresholded for accuracy, and ranked for AUC, so a pool
of 24 models (16,777,215 subsets) never has to be materialized. Per-size
quartiles are accumulated exactly from value counts.
"""

import bisect
import csv
import itertools
import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .errors import CapacityError, CoverageError, UndefinedMetricError, ValidationError
from .metrics import classification_metrics, confusion_at_threshold
from .records import ProbabilityRecord

MAX_EXHAUSTIVE_POOL = 24
METRICS = ("accuracy", "auc")


@dataclass
class EnsemblePool:
    """Member probabilities on one common test set; ``probs`` is (models, images)."""

    model_ids: tuple
    image_ids: tuple
    labels: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_records(cls, records, model_ids=None):
        by_model = {}
        for r in records:
            by_model.setdefault(r.model_id, {})
            if r.image_id in by_model[r.model_id]:
                raise ValidationError(f"model {r.model_id!r} scores image {r.image_id!r} twice")
            by_model[r.model_id][r.image_id] = r
        if model_ids is None:
            model_ids = sorted(by_model)
        model_ids = tuple(model_ids)
        if not model_ids:
            raise ValidationError("empty ensemble pool")
        missing = [m for m in model_ids if m not in by_model]
        if missing:
            raise ValidationError(f"no records for models {missing}")
        first = by_model[model_ids[0]]
        image_ids = tuple(first)
        universe = set(image_ids)
        for m in model_ids:
            universe |= set(by_model[m])
        for m in model_ids:
            absent = sorted(universe - set(by_model[m]))
            if absent:
                raise CoverageError(m, absent[0])
        labels = np.array([first[i].true_label for i in image_ids])
        probs = np.empty((len(model_ids), len(image_ids)))
        for a, m in enumerate(model_ids):
            recs = by_model[m]
            for b, i in enumerate(image_ids):
                if recs[i].true_label != labels[b]:
                    raise ValidationError(f"label disagreement on image {i!r} for model {m!r}")
                probs[a, b] = recs[i].p_abnormal
        return cls(model_ids, image_ids, labels, probs)

    @property
    def size(self):
        return len(self.model_ids)

    def indices(self, subset):
        ids = set(subset)
        if not ids:
            raise ValidationError("empty subset")
        unknown = sorted(ids - set(self.model_ids))
        if unknown:
            raise ValidationError(f"models not in pool: {unknown}")
        return [k for k, m in enumerate(self.model_ids) if m in ids]

    def member_records(self, model_id):
        (k,) = self.indices([model_id])
        return self._records(self.probs[k], model_id)

    def _records(self, p, model_id):
        return [ProbabilityRecord(i, model_id, float(pi), int(y)) for i, pi, y in zip(self.image_ids, p, self.labels)]


def _mean_rows(probs, idx):
    """Mean of rows ``idx`` (sorted, pool order) summed left to right; idx may be (k,) or (batch, k)."""
    idx = np.asarray(idx)
    total = probs[idx[..., 0]].copy()
    for j in range(1, idx.shape[-1]):
        total += probs[idx[..., j]]
    return total / idx.shape[-1]


def ensemble_id(model_ids):
    return model_ids[0] if len(model_ids) == 1 else "ensemble(" + "+".join(model_ids) + ")"


def average_probabilities(pool, subset, model_id=None):
    """Per-image unweighted mean of the subset's probabilities; labels carried through.

    A singleton subset returns the member's own records unchanged.
    """
    idx = pool.indices(subset)
    p = np.clip(_mean_rows(pool.probs, idx), 0.0, 1.0)
    return pool._records(p, model_id or ensemble_id([pool.model_ids[k] for k in idx]))


# -- subset study -------------------------------------------------------------


class SubsetResult(NamedTuple):
    subset: tuple
    bitmask: int
    accuracy: float
    auc: float

    @property
    def size(self):
        return len(self.subset)


def _batch_metrics(mean, labels, threshold):
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("sensitivity" if n_pos == 0 else "specificity")
    pred = mean >= threshold
    tp = (pred & pos).sum(axis=1)
    tn = (~pred & ~pos).sum(axis=1)
    if n_pos == n_neg:
        acc = (tp / n_pos + tn / n_neg) / 2
    else:
        acc = (tp + tn) / labels.size
    ranks = rankdata(mean, axis=1)
    auc = (ranks[:, pos].sum(axis=1) - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    return acc, auc


def _combinations(m, k, sample, rng):
    total = math.comb(m, k)
    if sample is None or total <= sample:
        yield from itertools.combinations(range(m), k)
        return
    chosen = set()
    while len(chosen) < sample:
        chosen.add(tuple(sorted(rng.choice(m, k, replace=False).tolist())))
    yield from sorted(chosen)


def evaluate_all_subsets(pool, threshold=0.5, sample_per_size=None, seed=0, batch_size=4096):
    """Yield one SubsetResult per non-empty subset, ordered by (size, member ids in pool order).

    Pools above 24 models require ``sample_per_size``: then at most that many
    subsets of each size are drawn uniformly without replacement (an
    approximation of the full study).
    """
    if pool.size < 2:
        raise ValidationError("subset studies need at least 2 models")
    if pool.size > MAX_EXHAUSTIVE_POOL and sample_per_size is None:
        raise CapacityError(f"pool of {pool.size} exceeds {MAX_EXHAUSTIVE_POOL} models; pass sample_per_size")
    order = sorted(range(pool.size), key=lambda k: pool.model_ids[k])
    probs = pool.probs[order]
    ids = [pool.model_ids[k] for k in order]
    bit = [1 << k for k in order]
    rng = np.random.default_rng(seed)
    for k in range(1, pool.size + 1):
        combos = _combinations(pool.size, k, sample_per_size, rng)
        while True:
            chunk = list(itertools.islice(combos, batch_size))
            if not chunk:
                break
            idx = np.array(chunk)
            acc, auc = _batch_metrics(_mean_rows(probs, idx), pool.labels, threshold)
            for c, a, u in zip(chunk, acc.tolist(), auc.tolist()):
                yield SubsetResult(tuple(ids[j] for j in c), sum(bit[j] for j in c), a, u)


class SizeStats(NamedTuple):
    n: int
    min: float
    q25: float
    median: float
    q75: float
    max: float


def _counter_quantile(values, cum, q):
    """Linear-interpolated quantile (numpy's default) of a multiset given sorted values and cumulative counts."""
    n = cum[-1]
    h = (n - 1) * q
    lo = math.floor(h)
    a = values[bisect.bisect_right(cum, lo)]
    b = values[bisect.bisect_right(cum, min(lo + 1, n - 1))]
    t = h - lo
    return a + t * (b - a) if t < 0.5 else b - (b - a) * (1 - t)


class SubsetStatsAccumulator:
    """Exact per-size quartiles from value counts; merging is order independent."""

    def __init__(self):
        self.counts = {m: {} for m in METRICS}

    def add(self, result):
        for m in METRICS:
            self.counts[m].setdefault(result.size, Counter())[getattr(result, m)] += 1

    def merge(self, other):
        for m in METRICS:
            for size, c in other.counts[m].items():
                self.counts[m].setdefault(size, Counter()).update(c)
        return self

    def stats(self, metric="accuracy"):
        if metric not in METRICS:
            raise ValidationError(f"unknown metric {metric!r}")
        if not self.counts[metric]:
            raise ValidationError("no subset results")
        out = {}
        for size in sorted(self.counts[metric]):
            c = self.counts[metric][size]
            values = sorted(c)
            cum = list(itertools.accumulate(c[v] for v in values))
            out[size] = SizeStats(cum[-1], values[0], *(_counter_quantile(values, cum, q) for q in (0.25, 0.5, 0.75)), values[-1])
        return out


def subset_size_stats(results, metric="accuracy"):
    """{size: SizeStats} over any iterable of SubsetResults (a generator is consumed once)."""
    acc = SubsetStatsAccumulator()
    for r in results:
        acc.add(r)
    return acc.stats(metric)


def export_subset_results(results, csv_path, accumulator=None):
    """Stream results to CSV (bitmask,size,accuracy,auc), optionally accumulating stats; returns the row count."""
    n = 0
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bitmask", "size", "accuracy", "auc"])
        for r in results:
            w.writerow([r.bitmask, r.size, repr(r.accuracy), repr(r.auc)])
            if accumulator is not None:
                accumulator.add(r)
            n += 1
    return n


def write_size_stats_json(path, accumulator, model_ids, sampled=False):
    """Per-size stats for both metrics; bit k of a CSV bitmask is ``model_ids[k]``."""
    doc = {
        "models": list(model_ids),
        "sampled": bool(sampled),
        "stats": {m: {str(s): v._asdict() for s, v in accumulator.stats(m).items()} for m in METRICS},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def read_size_stats_json(path):
    with open(path) as fh:
        doc = json.load(fh)
    doc["stats"] = {m: {int(s): SizeStats(**v) for s, v in d.items()} for m, d in doc["stats"].items()}
    return doc


# -- threshold tuning ---------------------------------------------------------


def tune_threshold(records, objective="accuracy"):
    """(threshold, accuracy) maximizing accuracy over every distinct probability plus 0.5.

    Ties go to the candidate closest to 0.5, then to the higher threshold.
    """
    if objective != "accuracy":
        raise ValidationError(f"unsupported objective {objective!r}")
    labels = {r.true_label for r in records}
    if labels != {0, 1}:
        raise ValidationError("threshold tuning needs both classes")
    candidates = sorted({r.p_abnormal for r in records} | {0.5})
    best = None
    for t in candidates:
        acc = classification_metrics(confusion_at_threshold(records, t)).accuracy
        # rounding merges accuracies that differ only by float summation order
        key = (round(acc, 12), -abs(t - 0.5), t)
        if best is None or key > best[0]:
            best = (key, t, acc)
    return best[1], best[2]
