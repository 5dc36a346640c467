"""Occlusion-sensitivity maps.

A square patch filled with a constant is slid over the raw image; every
occluded copy is scored by a classifier and the abnormal-class probability is
stored at that grid position. Regions whose occlusion lowers the probability
most are the ones the classifier relies on.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

from .datasets import load_image
from .errors import ScorerError, ValidationError

N_BINS = 20


@dataclass(frozen=True, eq=False)
class OcclusionConfig:
    patch_side: int = 40
    stride: int = 16
    fill: float = 0.0
    roi: np.ndarray | None = None
    keep_fraction: float = 0.2

    def __post_init__(self):
        if self.patch_side < 1:
            raise ValidationError("patch_side must be > 0")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")
        _check_fraction(self.keep_fraction)
        if self.roi is not None:
            object.__setattr__(self, "roi", np.asarray(self.roi, dtype=bool))

    def to_dict(self):
        return {"patch_side": self.patch_side, "stride": self.stride, "fill": self.fill,
                "keep_fraction": self.keep_fraction, "roi": self.roi is not None}

    def __eq__(self, other):
        if not isinstance(other, OcclusionConfig):
            return NotImplemented
        same_roi = (self.roi is None and other.roi is None) or (
            self.roi is not None and other.roi is not None and np.array_equal(self.roi, other.roi))
        return same_roi and self.to_dict() == other.to_dict()


def _check_fraction(f):
    if not 0.0 < f <= 1.0:
        raise ValidationError(f"keep_fraction must lie in (0, 1], got {f}")


def grid_positions(length, patch, stride):
    """Patch offsets along one axis; the last offset is pinned to the far edge so every pixel is covered."""
    if length < patch:
        raise ValidationError(f"image side {length} is smaller than the patch ({patch})")
    pos = list(range(0, length - patch + 1, stride))
    if pos[-1] != length - patch:
        pos.append(length - patch)
    return pos


@dataclass
class HeatMap:
    image_id: str
    grid: np.ndarray
    config: OcclusionConfig
    baseline_p: float
    image_shape: tuple
    rows: list = field(default_factory=list)
    cols: list = field(default_factory=list)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if not self.rows:
            self.rows = grid_positions(self.image_shape[0], self.config.patch_side, self.config.stride)
            self.cols = grid_positions(self.image_shape[1], self.config.patch_side, self.config.stride)
        if self.grid.shape != (len(self.rows), len(self.cols)):
            raise ValidationError(f"grid shape {self.grid.shape} does not match the occlusion layout")
        if np.any(~np.isfinite(self.grid)) or self.grid.min() < 0 or self.grid.max() > 1:
            raise ValidationError("heat map cells must lie in [0, 1]")

    @property
    def centers(self):
        """(rows, cols) arrays of patch-center pixel coordinates."""
        half = (self.config.patch_side - 1) / 2
        return np.array(self.rows) + half, np.array(self.cols) + half


def _score(scorer, images, positions):
    batch = getattr(scorer, "score_batch", None)
    if batch:
        try:
            values = list(batch(images))
        except ScorerError:
            raise
        except Exception as exc:
            raise ScorerError(f"scorer failed on the batch starting at patch {positions[0]}: {exc}", positions[0]) from exc
    else:
        values = []
        for im, pos in zip(images, positions):
            try:
                values.append(scorer(im))
            except ScorerError:
                raise
            except Exception as exc:
                raise ScorerError(f"scorer failed on patch at {pos}: {exc}", pos) from exc
    out = []
    for v, pos in zip(values, positions):
        v = float(v)
        if not 0.0 <= v <= 1.0:
            raise ScorerError(f"scorer returned {v} for patch at {pos}", pos)
        out.append(v)
    return out


def occlusion_map(record, scorer, config=OcclusionConfig(), image_id=None, batch_size=32):
    """Score every occluded copy of the image; ``record`` is an ImageRecord or a 2-D array.

    ``scorer`` maps a raw image to p_abnormal. If it exposes ``score_batch``
    occluded copies are scored in batches of ``batch_size``.
    """
    if isinstance(record, np.ndarray):
        image = np.asarray(record, dtype=float)
    else:
        image = load_image(record.path)
        image_id = image_id or record.id
    if image.ndim != 2:
        raise ValidationError("occlusion expects a grayscale image")
    p = config.patch_side
    rows = grid_positions(image.shape[0], p, config.stride)
    cols = grid_positions(image.shape[1], p, config.stride)
    (baseline,) = _score(scorer, [image], [None])
    cells = [(y, x) for y in rows for x in cols]
    values = []
    for start in range(0, len(cells), batch_size):
        chunk = cells[start : start + batch_size]
        imgs = []
        for y, x in chunk:
            occluded = image.copy()
            occluded[y : y + p, x : x + p] = config.fill
            imgs.append(occluded)
        values += _score(scorer, imgs, chunk)
    grid = np.array(values).reshape(len(rows), len(cols))
    return HeatMap(image_id or "", grid, config, baseline, image.shape, rows, cols)


def eligible_cells(hm, roi=None):
    """Row-major boolean grid of cells whose patch center lies inside ``roi`` (all cells when None)."""
    roi = hm.config.roi if roi is None else np.asarray(roi, dtype=bool)
    if roi is None:
        return np.ones(hm.grid.shape, dtype=bool)
    if roi.shape != tuple(hm.image_shape):
        raise ValidationError("roi mask must match the image raster")
    cy, cx = hm.centers
    return roi[np.round(cy).astype(int)[:, None], np.round(cx).astype(int)[None, :]]


def binarize_lowest_fraction(hm, keep_fraction=None, roi=None, mode="cells"):
    """Mark the lowest-probability cells.

    ``mode="cells"`` marks exactly floor(keep_fraction * eligible cells);
    ``mode="area"`` keeps marking cells in rank order until their footprints
    cover floor(keep_fraction * eligible area) pixels. Ties go to row-major order.
    """
    keep = hm.config.keep_fraction if keep_fraction is None else keep_fraction
    _check_fraction(keep)
    allowed = eligible_cells(hm, roi).ravel()
    idx = np.flatnonzero(allowed)
    ranked = idx[np.argsort(hm.grid.ravel()[idx], kind="stable")]
    mask = np.zeros(hm.grid.size, dtype=bool)
    if mode == "cells":
        mask[ranked[: math.floor(keep * idx.size + 1e-9)]] = True
    elif mode == "area":
        region = hm.config.roi if roi is None else np.asarray(roi, dtype=bool)
        area = int(region.sum()) if region is not None else hm.image_shape[0] * hm.image_shape[1]
        target = math.floor(keep * area + 1e-9)
        covered = np.zeros(hm.image_shape, dtype=bool)
        within = region if region is not None else np.ones(hm.image_shape, dtype=bool)
        p = hm.config.patch_side
        ncols = len(hm.cols)
        for k in ranked:
            if np.count_nonzero(covered & within) >= target:
                break
            y, x = hm.rows[k // ncols], hm.cols[k % ncols]
            covered[y : y + p, x : x + p] = True
            mask[k] = True
    else:
        raise ValidationError(f"unknown mode {mode!r}")
    return mask.reshape(hm.grid.shape)


def pixel_map(hm):
    """Per-pixel probability: the minimum over every patch footprint covering the pixel."""
    out = np.full(hm.image_shape, np.inf)
    p = hm.config.patch_side
    for i, y in enumerate(hm.rows):
        for j, x in enumerate(hm.cols):
            np.minimum(out[y : y + p, x : x + p], hm.grid[i, j], out=out[y : y + p, x : x + p])
    return out


def mask_to_pixels(hm, cell_mask):
    """Union of the patch footprints of marked cells."""
    out = np.zeros(hm.image_shape, dtype=bool)
    p = hm.config.patch_side
    for i, j in zip(*np.nonzero(cell_mask)):
        out[hm.rows[i] : hm.rows[i] + p, hm.cols[j] : hm.cols[j] + p] = True
    return out


# -- histograms ---------------------------------------------------------------


class Histogram(NamedTuple):
    edges: np.ndarray
    counts: np.ndarray
    frequencies: np.ndarray

    def to_dict(self):
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist(), "frequencies": self.frequencies.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["edges"]), np.array(d["counts"]), np.array(d["frequencies"]))


def heatmap_histogram(hm, bins=N_BINS):
    """Counts and normalized frequencies of cell probabilities over equal bins of [0, 1].

    Bin k holds [k/bins, (k+1)/bins); 1.0 joins the last bin. A 1e-9 guard keeps
    decimal edges such as 0.7 in the bin they name despite binary rounding.
    """
    v = hm.grid.ravel()
    idx = np.minimum(np.floor(v * bins + 1e-9).astype(int), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return Histogram(np.linspace(0.0, 1.0, bins + 1), counts, counts / counts.sum())


def average_histograms(hists):
    """Per-bin mean of normalized frequencies; counts are summed."""
    if not hists:
        raise ValidationError("no histograms to average")
    edges = hists[0].edges
    for h in hists[1:]:
        if h.edges.shape != edges.shape or not np.array_equal(h.edges, edges):
            raise ValidationError("histograms use different binnings")
    freq = np.mean([h.frequencies for h in hists], axis=0)
    return Histogram(edges, np.sum([h.counts for h in hists], axis=0), freq)


# -- overlays and persistence -------------------------------------------------


def render_overlay(image, pixel_mask, path, color=(255, 0, 0), alpha=0.45):
    """Write the image as RGB with ``pixel_mask`` tinted toward ``color``."""
    if not isinstance(image, np.ndarray):
        image = load_image(image.path)
    gray = np.clip(np.rint(np.asarray(image, dtype=float)), 0, 255).astype(np.uint8)
    if pixel_mask.shape != gray.shape:
        raise ValidationError("overlay mask must match the image raster")
    rgb = np.repeat(gray[..., None], 3, axis=2)
    tint = np.rint((1 - alpha) * rgb[pixel_mask] + alpha * np.array(color, dtype=float)).astype(np.uint8)
    rgb[pixel_mask] = tint
    Image.fromarray(rgb).save(path)
    return rgb


def write_heatmap(hm, csv_path, extra=None):
    """Grid as CSV (one row per grid row) and a JSON sidecar with layout, config and ``extra`` keys."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in hm.grid:
            w.writerow([repr(float(v)) for v in row])
    side = {"image_id": hm.image_id, "baseline_p": hm.baseline_p, "image_shape": list(hm.image_shape),
            "rows": list(map(int, hm.rows)), "cols": list(map(int, hm.cols)), "config": hm.config.to_dict()}
    side.update(extra or {})
    csv_path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def read_heatmap(csv_path, roi=None):
    csv_path = Path(csv_path)
    side = json.loads(csv_path.with_suffix(".json").read_text())
    with open(csv_path, newline="") as fh:
        grid = np.array([[float(v) for v in row] for row in csv.reader(fh)])
    cfg = dict(side["config"])
    cfg.pop("roi")
    return HeatMap(side["image_id"], grid, OcclusionConfig(roi=roi, **cfg), side["baseline_p"],
                   tuple(side["image_shape"]), side["rows"], side["cols"])


# -- in-process scorers -------------------------------------------------------


class HeadScorer:
    """Frozen backbone + trained head(s); with several heads their probabilities are averaged."""

    def __init__(self, spec, backbone, heads):
        from .backbones import features_for_arrays

        self._features = features_for_arrays
        self.spec = spec
        self.backbone = backbone
        self.heads = list(heads)
        if not self.heads:
            raise ValidationError("HeadScorer needs at least one head")

    def score_batch(self, images):
        X = self._features(list(images), self.spec, self.backbone)
        return np.mean([h.proba(X) for h in self.heads], axis=0)

    def __call__(self, image):
        return float(self.score_batch([image])[0])


class AveragingScorer:
    """Mean of several scorers (each ``image -> p`` or with ``score_batch``)."""

    def __init__(self, scorers):
        self.scorers = list(scorers)

    def score_batch(self, images):
        out = []
        for s in self.scorers:
            b = getattr(s, "score_batch", None)
            out.append(np.asarray(b(images) if b else [s(im) for im in images], dtype=float))
        return np.mean(out, axis=0)

    def __call__(self, image):
        return float(self.score_batch([image])[0])
