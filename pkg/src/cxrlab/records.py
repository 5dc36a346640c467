"""Per-image probability records exchanged between heads, metrics and ensembles."""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class ProbabilityRecord:
    image_id: str
    model_id: str
    p_abnormal: float
    true_label: int

    def __post_init__(self):
        if not 0.0 <= self.p_abnormal <= 1.0:
            raise ValidationError(f"p_abnormal out of [0, 1]: {self.p_abnormal}")
        if self.true_label not in (0, 1):
            raise ValidationError(f"true_label must be 0 or 1, got {self.true_label}")


def scores_and_labels(records):
    """Return (scores, labels) arrays for a non-empty record list."""
    if len(records) == 0:
        raise ValidationError("no probability records")
    scores = np.fromiter((r.p_abnormal for r in records), dtype=float, count=len(records))
    labels = np.fromiter((r.true_label for r in records), dtype=int, count=len(records))
    return scores, labels


CSV_FIELDS = ("image_id", "model_id", "p_abnormal", "true_label")


def write_records_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for r in records:
            writer.writerow([r.image_id, r.model_id, repr(float(r.p_abnormal)), r.true_label])


def read_records_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValidationError(f"{path}: expected header {','.join(CSV_FIELDS)}")
        return [
            ProbabilityRecord(row["image_id"], row["model_id"], float(row["p_abnormal"]), int(row["true_label"]))
            for row in reader
        ]
