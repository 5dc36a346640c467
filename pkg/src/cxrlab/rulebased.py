"""Rule-based cardiomegaly baseline.

Pipeline: radon-projection signatures rank the atlas pool by mean
Bhattacharyya distance; the closest atlases are warped onto the test image
through a dense correspondence field and their lung/heart masks are fused by
per-pixel majority vote; cardiothoracic ratios are measured on the result and
fed to a linear SVM.

The shipped correspondence is block matching of smoothed gradient
descriptors followed by median/gaussian smoothing of the displacement field.
It stands in for SIFT-flow; any callable with the same signature can replace it.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.morphology import convex_hull_image
from skimage.transform import resize

from .datasets import MASK_NAMES, load_image, load_mask, save_mask
from .errors import CapacityError, DegenerateSegmentationError, SegmentationError, ValidationError
from .records import ProbabilityRecord

log = logging.getLogger(__name__)

DEFAULT_ANGLES = tuple(float(a) for a in range(0, 91))
DISJOINT_DISTANCE = 1e9


@dataclass
class RadonSignature:
    image_id: str
    angles: tuple
    projections: list

    def __post_init__(self):
        if len(self.angles) != len(self.projections):
            raise ValidationError("one projection per angle required")


def _project(image, angle):
    if angle == 0.0:
        rotated = image
    elif angle == 90.0:
        rotated = np.rot90(image)
    else:
        rotated = ndimage.rotate(image, angle, reshape=True, order=1, mode="constant", cval=0.0)
    return np.clip(rotated.sum(axis=0), 0.0, None)


def radon_signature(image, angles=DEFAULT_ANGLES, image_id="", size=None):
    """Normalized line-integral projections of ``image`` at each angle in [0, 90].

    Angle 0 sums down the columns; 90 sums along the rows. ``size`` first
    resamples the image to a square raster so signatures of different images
    have matching lengths.
    """
    angles = tuple(float(a) for a in angles)
    if not angles:
        raise ValidationError("empty angle list")
    if any(not 0.0 <= a <= 90.0 for a in angles):
        raise ValidationError("angles must lie in [0, 90] degrees")
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValidationError("radon signature needs a grayscale image")
    if size is not None and img.shape != (size, size):
        img = resize(img, (size, size), order=1, anti_aliasing=True, preserve_range=True)
    projections = []
    for a in angles:
        p = _project(img, a)
        total = p.sum()
        if total <= 0:
            raise ValidationError(f"projection at {a} degrees has zero mass")
        projections.append(p / total)
    return RadonSignature(image_id, angles, projections)


def bhattacharyya_distance(a, b, tol=1e-6):
    """-ln sum(sqrt(a_i b_i)) for two discrete distributions.

    Disjoint supports give DISJOINT_DISTANCE rather than infinity. Distinct
    inputs never report exactly zero.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(f"distribution shapes differ: {a.shape} vs {b.shape}")
    for name, d in (("a", a), ("b", b)):
        if np.any(d < 0) or abs(d.sum() - 1.0) > tol:
            raise ValidationError(f"distribution {name} is not normalized")
    if np.array_equal(a, b):
        return 0.0
    coeff = float(np.sum(np.sqrt(a * b)))
    if coeff <= 0.0:
        return DISJOINT_DISTANCE
    return max(-math.log(coeff), math.nextafter(0.0, 1.0))


def signature_distance(s, t):
    if s.angles != t.angles:
        raise ValidationError(f"signatures {s.image_id!r} and {t.image_id!r} use different angle grids")
    return float(np.mean([bhattacharyya_distance(p, q) for p, q in zip(s.projections, t.projections)]))


def rank_similar_atlases(test_signature, atlas_signatures, k=5):
    """Top-k (atlas id, mean distance) pairs, ascending; ties go to the smaller id."""
    if k > len(atlas_signatures):
        raise CapacityError(f"k={k} exceeds atlas pool of {len(atlas_signatures)}")
    scored = sorted((signature_distance(test_signature, s), s.image_id) for s in atlas_signatures)
    return [(i, d) for d, i in scored[:k]]


# -- segmentation transfer ----------------------------------------------------


@dataclass
class AtlasEntry:
    image_id: str
    image: np.ndarray
    masks: dict

    def __post_init__(self):
        missing = [n for n in MASK_NAMES if n not in self.masks]
        if missing:
            raise ValidationError(f"atlas {self.image_id} lacks masks {missing}")
        for n in MASK_NAMES:
            if self.masks[n].shape != self.image.shape:
                raise ValidationError(f"atlas {self.image_id}: mask {n} size differs from image")

    @classmethod
    def from_record(cls, record, size=None):
        image = load_image(record.path)
        masks = {n: load_mask(record.masks[n]) for n in MASK_NAMES if n in record.masks}
        if size is not None:
            image = resize_image(image, size)
            masks = {n: resize_mask(m, size) for n, m in masks.items()}
        else:
            masks = {n: resize_mask(m, image.shape) if m.shape != image.shape else m for n, m in masks.items()}
        return cls(record.id, image, masks)


def resize_image(image, size):
    shape = (size, size) if np.isscalar(size) else tuple(size)
    if image.shape == shape:
        return np.asarray(image, dtype=float)
    return resize(image, shape, order=1, anti_aliasing=True, preserve_range=True)


def resize_mask(mask, size):
    shape = (size, size) if np.isscalar(size) else tuple(size)
    if mask.shape == shape:
        return mask.astype(bool)
    return resize(mask.astype(float), shape, order=0, anti_aliasing=False) > 0.5


@dataclass
class Segmentation:
    image_id: str
    masks: dict
    provenance: list = field(default_factory=list)

    def save(self, directory):
        """One PNG per mask plus a JSON sidecar listing the atlases used."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for n in MASK_NAMES:
            save_mask(self.masks[n], d / f"{self.image_id}_{n}.png")
        (d / f"{self.image_id}_segmentation.json").write_text(
            json.dumps({"image_id": self.image_id, "provenance": list(self.provenance)}, indent=2))

    @classmethod
    def load(cls, directory, image_id):
        d = Path(directory)
        meta = json.loads((d / f"{image_id}_segmentation.json").read_text())
        masks = {n: load_mask(d / f"{image_id}_{n}.png") for n in MASK_NAMES}
        return cls(image_id, masks, meta["provenance"])


def _descriptors(image, sigma=1.5):
    img = np.asarray(image, dtype=float)
    img = (img - img.mean()) / (img.std() + 1e-9)
    smooth = ndimage.gaussian_filter(img, sigma)
    return np.stack([ndimage.sobel(smooth, axis=0), ndimage.sobel(smooth, axis=1), 0.5 * smooth])


def _shift(a, dy, dx):
    """out[y, x] = a[y + dy, x + dx], zero outside."""
    out = np.zeros_like(a)
    h, w = a.shape[-2:]
    ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
    xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
    out[..., yd, xd] = a[..., ys, xs]
    return out


def block_matching_flow(atlas_image, test_image, search=10, block=15, smoothing=4.0, penalty=1e-3):
    """Dense field on the test grid: test pixel (y, x) matches atlas (y + fy, x + fx).

    Every pixel picks the displacement whose descriptor block cost is lowest
    (plus a small quadratic penalty on displacement length); the field is then
    median filtered and gaussian smoothed.
    """
    if atlas_image.shape != test_image.shape:
        raise ValidationError("atlas and test images must share a raster")
    da = _descriptors(atlas_image)
    dt = _descriptors(test_image)
    h, w = test_image.shape
    best = np.full((h, w), np.inf)
    flow = np.zeros((2, h, w))
    for dy in range(-search, search + 1):
        for dx in range(-search, search + 1):
            diff = ((_shift(da, dy, dx) - dt) ** 2).sum(axis=0)
            cost = ndimage.uniform_filter(diff, size=block, mode="constant") + penalty * (dy * dy + dx * dx)
            better = cost < best
            best[better] = cost[better]
            flow[0][better] = dy
            flow[1][better] = dx
    for c in range(2):
        flow[c] = ndimage.gaussian_filter(ndimage.median_filter(flow[c], size=block), smoothing)
    return flow


def warp_mask(mask, flow):
    h, w = flow.shape[1:]
    yy, xx = np.mgrid[:h, :w].astype(float)
    coords = np.stack([yy + flow[0], xx + flow[1]])
    return ndimage.map_coordinates(mask.astype(float), coords, order=0, mode="constant", cval=0.0) > 0.5


def transfer_segmentation(test_image, atlases, correspondence=block_matching_flow, image_id=""):
    """Warp each atlas's masks onto the test image and fuse them by strict majority vote."""
    votes = {n: np.zeros(test_image.shape, dtype=int) for n in MASK_NAMES}
    used = []
    for atlas in atlases:
        try:
            flow = correspondence(atlas.image, test_image)
            warped = {n: warp_mask(atlas.masks[n], flow) for n in MASK_NAMES}
        except Exception as exc:
            log.warning("correspondence failed for atlas %s: %s; dropping it", atlas.image_id, exc)
            continue
        for n in MASK_NAMES:
            votes[n] += warped[n]
        used.append(atlas.image_id)
    if not used:
        raise SegmentationError(f"every atlas failed to register onto {image_id or 'the test image'}")
    return Segmentation(image_id, {n: votes[n] * 2 > len(used) for n in MASK_NAMES}, used)


# -- cardiothoracic features --------------------------------------------------


@dataclass
class RuleFeatures:
    ctr_1d: float
    ctr_2d: float
    ctar: float
    image_id: str | None = None

    def as_array(self):
        return np.array([self.ctr_1d, self.ctr_2d, self.ctar])

    def to_dict(self):
        return {"image_id": self.image_id, "ctr_1d": self.ctr_1d, "ctr_2d": self.ctr_2d, "ctar": self.ctar}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["ctr_1d"]), float(d["ctr_2d"]), float(d["ctar"]), d.get("image_id"))


def write_rule_features(path, features):
    with open(path, "w") as fh:
        json.dump([f.to_dict() for f in features], fh, indent=2, sort_keys=True)


def read_rule_features(path):
    with open(path) as fh:
        return [RuleFeatures.from_dict(d) for d in json.load(fh)]


def max_row_extent(mask):
    """Largest horizontal extent (outermost columns, inclusive) over all rows."""
    rows = np.nonzero(mask.any(axis=1))[0]
    best = 0
    for r in rows:
        cols = np.nonzero(mask[r])[0]
        best = max(best, cols[-1] - cols[0] + 1)
    return int(best)


def boundary_pixel_count(mask):
    """Pixels of ``mask`` with at least one 4-neighbour outside it."""
    m = np.pad(mask.astype(bool), 1)
    interior = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return int(np.sum(m[1:-1, 1:-1] & ~interior))


def thoracic_region(lung_left, lung_right):
    return convex_hull_image(lung_left) | convex_hull_image(lung_right)


def compute_rule_features(seg):
    masks = seg.masks
    for n in MASK_NAMES:
        if n not in masks or not np.any(masks[n]):
            raise DegenerateSegmentationError(n)
    heart = masks["heart"].astype(bool)
    left = masks["lung_left"].astype(bool)
    right = masks["lung_right"].astype(bool)
    ctr_1d = max_row_extent(heart) / max_row_extent(left | right)
    ctr_2d = boundary_pixel_count(heart) / boundary_pixel_count(thoracic_region(left, right))
    ctar = heart.sum() / (left.sum() + right.sum())
    return RuleFeatures(float(ctr_1d), float(ctr_2d), float(ctar), seg.image_id)


# -- classifier ---------------------------------------------------------------


class RuleClassifier:
    """Linear SVM over (ctr_1d, ctr_2d, ctar) with a fitted increasing logistic link."""

    def __init__(self, scaler, svm, slope, intercept, model_id="rule_svm"):
        self.scaler = scaler
        self.svm = svm
        self.slope = slope
        self.intercept = intercept
        self.model_id = model_id

    def decision_function(self, X):
        return self.svm.decision_function(self.scaler.transform(np.atleast_2d(X)))

    def proba(self, X):
        z = self.slope * self.decision_function(X) + self.intercept
        return 1.0 / (1.0 + np.exp(-z))

    def predict_proba(self, features, labels):
        X = np.stack([f.as_array() for f in features])
        p = self.proba(X)
        if not isinstance(labels, dict):
            labels = {f.image_id: int(y) for f, y in zip(features, labels)}
        return [ProbabilityRecord(f.image_id, self.model_id, float(pi), int(labels[f.image_id])) for f, pi in zip(features, p)]

    def to_dict(self):
        return {
            "model_id": self.model_id,
            "scaler_mean": self.scaler.mean_.tolist(),
            "scaler_scale": self.scaler.scale_.tolist(),
            "coef": self.svm.coef_.ravel().tolist(),
            "intercept": float(self.svm.intercept_[0]),
            "link_slope": self.slope,
            "link_intercept": self.intercept,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def train_rule_classifier(features, labels, seed=0, C=1.0, model_id="rule_svm"):
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler
    from sklearn.svm import SVC

    X = np.stack([f.as_array() if hasattr(f, "as_array") else np.asarray(f, float) for f in features])
    y = np.asarray(labels, dtype=int)
    if set(np.unique(y)) != {0, 1}:
        raise ValidationError("rule classifier needs both classes")
    scaler = StandardScaler().fit(X)
    svm = SVC(kernel="linear", C=C, random_state=seed).fit(scaler.transform(X), y)
    scores = svm.decision_function(scaler.transform(X))
    link = LogisticRegression(random_state=seed).fit(scores[:, None], y)
    slope = float(link.coef_[0, 0])
    intercept = float(link.intercept_[0])
    if slope <= 0:
        # keep the score-to-probability map increasing
        slope, intercept = 1.0, 0.0
    return RuleClassifier(scaler, svm, slope, intercept, model_id)


# -- end-to-end helper --------------------------------------------------------


def segment_with_atlases(record, atlas_pool, k=5, size=128, angles=DEFAULT_ANGLES, correspondence=block_matching_flow,
                         signature_cache=None):
    """Atlas-transfer segmentation of one record against a list of AtlasEntry (all at ``size``)."""
    image = resize_image(load_image(record.path), size)
    sig = radon_signature(image, angles, record.id)
    pool = [a for a in atlas_pool if a.image_id != record.id]
    if signature_cache is None:
        signature_cache = {}
    sigs = []
    for a in pool:
        if a.image_id not in signature_cache:
            signature_cache[a.image_id] = radon_signature(a.image, angles, a.image_id)
        sigs.append(signature_cache[a.image_id])
    ranked = rank_similar_atlases(sig, sigs, k)
    chosen = {i for i, _ in ranked}
    return transfer_segmentation(image, [a for a in pool if a.image_id in chosen], correspondence, record.id)
