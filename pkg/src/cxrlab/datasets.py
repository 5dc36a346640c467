"""Dataset ingestion, manifests and balanced train/test splits.

Supported on-disk layouts (paths relative to the dataset root):

indiana
    ``indiana_reports.csv`` (uid, MeSH, ...), ``indiana_projections.csv``
    (uid, filename, projection) and the PNGs under ``images/``.
jsrt
    ``JPCLN###`` / ``JPCNN###`` images as ``.IMG`` (raw 12-bit) or ``.png``,
    the annotation files ``CLNDAT_EN.txt`` and ``CNNDAT_EN.TXT``, and optional
    SCR masks under ``scr/masks/{left lung,right lung,heart}/<stem>.gif``.
shenzhen
    ``CHNCXR_####_<c>.png`` under ``CXR_png/`` (or the root) where ``c`` is 0
    for normal and 1 for tuberculosis; ``ClinicalReadings/`` is checked when
    present.
synthetic
    ``labels.csv`` (id, filename, view, labels) with ``|``-separated tags and
    optional masks ``masks/<id>_<mask>.png``.
"""

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CapacityError, IngestionError, ValidationError

SOURCES = ("indiana", "jsrt", "shenzhen", "synthetic")
VIEWS = ("frontal", "lateral")
MASK_NAMES = ("lung_left", "lung_right", "heart")


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    source: str
    view: str = "frontal"
    labels: frozenset = frozenset()
    masks: dict = field(default_factory=dict, hash=False, compare=True)

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValidationError(f"unknown source {self.source!r}")
        if self.view not in VIEWS:
            raise ValidationError(f"unknown view {self.view!r}")
        if "normal" in self.labels:
            raise ValidationError(f"{self.id}: 'normal' is encoded as an empty label set")
        object.__setattr__(self, "labels", frozenset(self.labels))

    @property
    def is_normal(self):
        return not self.labels

    def to_dict(self):
        return {
            "id": self.id,
            "path": self.path,
            "source": self.source,
            "view": self.view,
            "labels": sorted(self.labels),
            "masks": dict(sorted(self.masks.items())),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], d["path"], d["source"], d.get("view", "frontal"), frozenset(d.get("labels", ())), dict(d.get("masks", {})))


@dataclass
class DatasetManifest:
    records: list
    provenance: str = ""

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ValidationError(f"duplicate image id {r.id!r} in manifest")
            seen.add(r.id)
        self._index = {r.id: r for r in self.records}

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, image_id):
        return self._index[image_id]

    def __contains__(self, image_id):
        return image_id in self._index

    def __eq__(self, other):
        return isinstance(other, DatasetManifest) and self.records == other.records and self.provenance == other.provenance

    def tags(self):
        return sorted(set().union(*(r.labels for r in self.records))) if self.records else []

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump({"provenance": self.provenance, "records": [r.to_dict() for r in self.records]}, fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        if isinstance(data, list):
            return cls([ImageRecord.from_dict(d) for d in data])
        return cls([ImageRecord.from_dict(d) for d in data["records"]], data.get("provenance", ""))

    @classmethod
    def combine(cls, manifests):
        records = [r for m in manifests for r in m.records]
        return cls(records, "; ".join(m.provenance for m in manifests if m.provenance))


# -- image io -----------------------------------------------------------------

JSRT_SIDE = 2048


def load_image(path):
    """Read a radiograph as a 2-D float array on the 0..255 intensity scale.

    RGB files are converted to luminance. JSRT ``.IMG`` files are raw
    big-endian 12-bit data with inverted polarity; they are flipped so that
    dense tissue is bright, as in the PNG distributions.
    """
    path = Path(path)
    try:
        if path.suffix.upper() == ".IMG":
            raw = np.fromfile(path, dtype=">u2")
            if raw.size != JSRT_SIDE * JSRT_SIDE:
                raise ValidationError(f"{path}: expected {JSRT_SIDE}x{JSRT_SIDE} raw pixels, found {raw.size}")
            img = 255.0 * (1.0 - raw.reshape(JSRT_SIDE, JSRT_SIDE).astype(float) / 4095.0)
            return np.clip(img, 0.0, 255.0)
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=float)
                top = 65535.0 if arr.max() > 4095 else 4095.0
                img = arr * (255.0 / top)
            else:
                img = np.asarray(im.convert("L"), dtype=float)
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if img.size == 0:
        raise ValidationError(f"{path}: zero-sized image")
    return img


def load_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def save_mask(mask, path):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


# -- ingestion ----------------------------------------------------------------


def normalize_tag(term):
    """'Pulmonary Disease, Chronic Obstructive' -> 'pulmonary_disease_chronic_obstructive'."""
    words = re.findall(r"[a-z0-9]+", term.lower())
    return "_".join(words)


def _read_csv(path, required):
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing annotation file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty annotation file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise IngestionError(f"{path}: header lacks columns {missing}")
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}:{reader.line_num}: expected {len(header)} fields, found {len(row)}")
            rows.append((reader.line_num, dict(zip(header, row))))
    return rows


def _load_indiana(root):
    reports_path = root / "indiana_reports.csv"
    proj_path = root / "indiana_projections.csv"
    image_dir = root / "images"
    has_images = image_dir.is_dir() and any(image_dir.iterdir())
    if not (reports_path.exists() or proj_path.exists() or has_images):
        return []
    labels_by_uid = {}
    for line, row in _read_csv(reports_path, ("uid", "MeSH")):
        mesh = row["MeSH"].strip()
        if not mesh:
            raise IngestionError(f"{reports_path}:{line}: empty MeSH field")
        tags = set()
        for term in mesh.split(";"):
            tag = normalize_tag(term.split("/")[0])
            if not tag:
                raise IngestionError(f"{reports_path}:{line}: unparseable MeSH term {term!r}")
            if tag != "normal":
                tags.add(tag)
        labels_by_uid[row["uid"]] = frozenset(tags)
    records = []
    for line, row in _read_csv(proj_path, ("uid", "filename", "projection")):
        uid = row["uid"]
        if uid not in labels_by_uid:
            raise IngestionError(f"{proj_path}:{line}: uid {uid!r} has no report in {reports_path.name}")
        projection = row["projection"].strip().lower()
        if projection not in VIEWS:
            raise IngestionError(f"{proj_path}:{line}: unknown projection {row['projection']!r}")
        path = image_dir / row["filename"]
        if not path.exists():
            raise IngestionError(f"{proj_path}:{line}: image file {path} not found")
        image_id = Path(row["filename"]).stem
        records.append(ImageRecord(image_id, str(path), "indiana", projection, labels_by_uid[uid]))
    return records


JSRT_NAME = re.compile(r"^(JPC[LN]N\d{3})\.(IMG|PNG)$", re.IGNORECASE)
SCR_DIRS = {"lung_left": "left lung", "lung_right": "right lung", "heart": "heart"}


def _read_jsrt_annotations(path):
    names = set()
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            first = line.split()[0]
            m = re.match(r"^(JPC[LN]N\d{3})(\.IMG)?$", first, re.IGNORECASE)
            if not m:
                raise IngestionError(f"{path}:{lineno}: cannot parse image name from {first!r}")
            names.add(m.group(1).upper())
    return names


def _find_case_insensitive(root, name):
    for p in root.iterdir():
        if p.name.lower() == name.lower():
            return p
    return None


def _load_jsrt(root):
    images = {}
    for p in sorted(root.iterdir()):
        m = JSRT_NAME.match(p.name)
        if m:
            stem = m.group(1).upper()
            # a converted PNG wins over the raw file
            if stem not in images or p.suffix.lower() == ".png":
                images[stem] = p
    if not images:
        return []
    annotated = {}
    for fname, prefix, tags in (("CLNDAT_EN.txt", "JPCLN", frozenset({"nodule"})), ("CNNDAT_EN.TXT", "JPCNN", frozenset())):
        if not any(s.startswith(prefix) for s in images):
            continue
        ann = _find_case_insensitive(root, fname)
        if ann is None:
            raise IngestionError(f"missing annotation file {root / fname}")
        for stem in _read_jsrt_annotations(ann):
            annotated[stem] = tags
    records = []
    scr = root / "scr" / "masks"
    for stem, path in sorted(images.items()):
        if stem not in annotated:
            raise IngestionError(f"image {path.name} is not listed in the JSRT annotation files")
        masks = {}
        for name, sub in SCR_DIRS.items():
            mp = scr / sub / f"{stem}.gif"
            if mp.exists():
                masks[name] = str(mp)
        records.append(ImageRecord(stem, str(path), "jsrt", "frontal", annotated[stem], masks))
    return records


SHENZHEN_NAME = re.compile(r"^CHNCXR_(\d{4})_(\d)\.png$", re.IGNORECASE)


def _load_shenzhen(root):
    image_dir = root / "CXR_png" if (root / "CXR_png").is_dir() else root
    readings = root / "ClinicalReadings"
    records = []
    for p in sorted(image_dir.glob("*")):
        if not p.name.upper().startswith("CHNCXR_") or p.suffix.lower() != ".png":
            continue
        m = SHENZHEN_NAME.match(p.name)
        if not m or m.group(2) not in "01":
            raise IngestionError(f"cannot parse class suffix from {p.name}")
        if readings.is_dir() and not (readings / f"{p.stem}.txt").exists():
            raise IngestionError(f"missing annotation file {readings / (p.stem + '.txt')}")
        tags = frozenset({"tuberculosis"}) if m.group(2) == "1" else frozenset()
        records.append(ImageRecord(p.stem, str(p), "shenzhen", "frontal", tags))
    return records


def _load_synthetic(root):
    labels_path = root / "labels.csv"
    if not labels_path.exists():
        if any(root.iterdir()):
            raise IngestionError(f"missing annotation file {labels_path}")
        return []
    records = []
    for line, row in _read_csv(labels_path, ("id", "filename", "view", "labels")):
        tags = frozenset(t for t in (normalize_tag(x) for x in row["labels"].split("|")) if t)
        if "normal" in tags:
            raise IngestionError(f"{labels_path}:{line}: 'normal' must be written as an empty label list")
        view = row["view"].strip().lower()
        if view not in VIEWS:
            raise IngestionError(f"{labels_path}:{line}: unknown view {row['view']!r}")
        path = root / row["filename"]
        if not path.exists():
            raise IngestionError(f"{labels_path}:{line}: image file {path} not found")
        masks = {}
        for name in MASK_NAMES:
            mp = root / "masks" / f"{row['id']}_{name}.png"
            if mp.exists():
                masks[name] = str(mp)
        records.append(ImageRecord(row["id"], str(path), "synthetic", view, tags, masks))
    return records


_LOADERS = {"indiana": _load_indiana, "jsrt": _load_jsrt, "shenzhen": _load_shenzhen, "synthetic": _load_synthetic}


def load_manifest(root, source):
    if source not in _LOADERS:
        raise ValidationError(f"unknown dataset source {source!r}; expected one of {SOURCES}")
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    return DatasetManifest(_LOADERS[source](root), f"{source}:{root}")


# -- splits -------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    abnormality: str
    seed: int
    train_pos: tuple
    train_neg: tuple
    test_pos: tuple
    test_neg: tuple

    def __post_init__(self):
        for name in ("train_pos", "train_neg", "test_pos", "test_neg"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        lists = (self.train_pos, self.train_neg, self.test_pos, self.test_neg)
        ids = [i for lst in lists for i in lst]
        if len(ids) != len(set(ids)):
            raise ValidationError("split lists overlap")
        if len(self.train_pos) != len(self.train_neg) or len(self.test_pos) != len(self.test_neg):
            raise ValidationError("split is not class balanced")

    @property
    def train_ids(self):
        return self.train_pos + self.train_neg

    @property
    def test_ids(self):
        return self.test_pos + self.test_neg

    def labelled(self, part):
        """(image_id, label) pairs for ``part`` in {"train", "test"}."""
        pos, neg = (self.train_pos, self.train_neg) if part == "train" else (self.test_pos, self.test_neg)
        return [(i, 1) for i in pos] + [(i, 0) for i in neg]

    def to_dict(self):
        return {
            "abnormality": self.abnormality,
            "seed": self.seed,
            "train_pos": list(self.train_pos),
            "train_neg": list(self.train_neg),
            "test_pos": list(self.test_pos),
            "test_neg": list(self.test_neg),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["abnormality"], d["seed"], d["train_pos"], d["train_neg"], d["test_pos"], d["test_neg"])

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def candidate_pools(manifest, abnormality, include_lateral=False):
    """Sorted positive and normal id pools for one abnormality."""
    views = VIEWS if include_lateral else ("frontal",)
    usable = [r for r in manifest if r.view in views]
    positives = sorted(r.id for r in usable if abnormality in r.labels)
    normals = sorted(r.id for r in usable if r.is_normal)
    return positives, normals


def make_balanced_split(manifest, abnormality, n_train, n_test, seed, include_lateral=False):
    """Seeded balanced split; normals are sampled without replacement."""
    if n_train < 0 or n_test < 0:
        raise ValidationError("split sizes must be non-negative")
    positives, normals = candidate_pools(manifest, abnormality, include_lateral)
    need = n_train + n_test
    if len(positives) < need or len(normals) < need:
        raise CapacityError(
            f"{abnormality!r} split needs {need} per class; available positives={len(positives)}, normals={len(normals)}"
        )
    rng = np.random.default_rng(seed)
    pos = [positives[i] for i in rng.permutation(len(positives))[:need]]
    neg = [normals[i] for i in rng.choice(len(normals), size=need, replace=False)]
    return SplitSpec(abnormality, seed, pos[:n_train], neg[:n_train], pos[n_train:], neg[n_train:])


def make_size_sweep(manifest, abnormality, sizes, n_test, seeds, include_lateral=False):
    """Nested training-size splits; for a fixed seed every size shares one test set.

    Smaller training sets are prefixes of the largest one.
    """
    if not sizes:
        return []
    largest = max(sizes)
    out = []
    for seed in seeds:
        base = make_balanced_split(manifest, abnormality, largest, n_test, seed, include_lateral)
        for size in sizes:
            out.append(SplitSpec(abnormality, seed, base.train_pos[:size], base.train_neg[:size], base.test_pos, base.test_neg))
    return out
