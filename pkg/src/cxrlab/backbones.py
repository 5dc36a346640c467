"""Frozen-backbone feature extraction.

Layer names follow the MatConvNet conventions: ``fc7`` is the second fully
connected layer of AlexNet/VGG; ResNet blocks are ``res<stage><block>``
with ``_branch2c`` (convolution), ``_branch2cx`` (batch norm), the bare
block name (residual sum) and an ``x`` suffix (ReLU after the sum).

Two backbone implementations are provided:

* ``standin`` - a small numpy convolutional stack with fixed-seed random
  weights. It needs no downloads and is what the test-suite runs on.
* torchvision models for the six published families, loaded from a local
  ``state_dict`` file, ``torchvision:<WEIGHTS>`` (model-zoo download), or
  ``random:<seed>`` (untrained, for plumbing checks). torch is imported lazily.
"""

import csv
import functools
import hashlib
import json
import subprocess
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .datasets import load_image
from .errors import ConfigurationError, LayerNameError, ScorerError, ValidationError

FAMILIES = ("alexnet", "vgg16", "vgg19", "resnet50", "resnet101", "resnet152", "standin")
PREPROCESSING = ("mean_subtract", "scale_unit")
IMAGENET_MEAN = np.array([123.68, 116.779, 103.939])
TORCH_MEAN = np.array([0.485, 0.456, 0.406])
TORCH_STD = np.array([0.229, 0.224, 0.225])

DEFAULT_TAP = {
    "alexnet": "fc7",
    "vgg16": "fc7",
    "vgg19": "fc7",
    "resnet50": "res4f",
    "resnet101": "res4b22",
    "resnet152": "res4b35",
    "standin": "pool2",
}

# -- layer tables -------------------------------------------------------------

_VGG_BLOCKS = {"vgg16": (2, 2, 3, 3, 3), "vgg19": (2, 2, 4, 4, 4)}
_RESNET_DEPTHS = {"resnet50": (3, 4, 6, 3), "resnet101": (3, 4, 23, 3), "resnet152": (3, 8, 36, 3)}


def _resnet_block_names(family):
    names = []
    for stage, n in zip((2, 3, 4, 5), _RESNET_DEPTHS[family]):
        if family == "resnet50" or n <= 3 or stage in (2, 5):
            names.append([f"res{stage}{chr(ord('a') + i)}" for i in range(n)])
        else:
            names.append([f"res{stage}a"] + [f"res{stage}b{i}" for i in range(1, n)])
    return names


def _resnet_layers(family):
    layers = ["conv1", "conv1x", "conv1xx", "pool1"]
    for stage in _resnet_block_names(family):
        for i, blk in enumerate(stage):
            if i == 0:
                layers += [f"{blk}_branch1", f"{blk}_branch1x"]
            for part in ("2a", "2b", "2c"):
                layers += [f"{blk}_branch{part}", f"{blk}_branch{part}x"]
            layers += [blk, f"{blk}x"]
    return layers + ["pool5", "fc1000"]


def _vgg_layers(family):
    layers = []
    for b, n in enumerate(_VGG_BLOCKS[family], start=1):
        for i in range(1, n + 1):
            layers += [f"conv{b}_{i}", f"relu{b}_{i}"]
        layers.append(f"pool{b}")
    return layers + ["fc6", "relu6", "fc7", "relu7", "fc8"]


_ALEXNET_LAYERS = [
    "conv1", "relu1", "pool1", "conv2", "relu2", "pool2", "conv3", "relu3",
    "conv4", "relu4", "conv5", "relu5", "pool5", "fc6", "relu6", "fc7", "relu7", "fc8",
]
_STANDIN_LAYERS = ["conv1", "relu1", "pool1", "conv2", "relu2", "pool2", "gap"]


@functools.lru_cache(maxsize=None)
def layer_names(family):
    if family in _RESNET_DEPTHS:
        return tuple(_resnet_layers(family))
    if family in _VGG_BLOCKS:
        return tuple(_vgg_layers(family))
    if family == "alexnet":
        return tuple(_ALEXNET_LAYERS)
    if family == "standin":
        return tuple(_STANDIN_LAYERS)
    raise ValidationError(f"unknown backbone family {family!r}; expected one of {FAMILIES}")


def list_candidate_layers(family):
    """Candidate tap layers as (name, stage, operation) rows for a layer study."""
    if family in _RESNET_DEPTHS:
        b4 = _resnet_block_names(family)[2][-1]
        rows = []
        for blk, stage in ((b4, "4th"), ("res5c", "5th")):
            rows += [
                (f"{blk}_branch2c", stage, "Convolution"),
                (f"{blk}_branch2cx", stage, "Batch Normalization"),
                (blk, stage, "Residual Connection"),
                (f"{blk}x", stage, "ReLU"),
            ]
        return rows + [("pool5", "Final", "Average Pooling")]
    if family in _VGG_BLOCKS or family == "alexnet":
        return [
            ("pool5", "5th", "Max Pooling"),
            ("fc6", "FC", "Fully Connected"),
            ("relu6", "FC", "ReLU"),
            ("fc7", "FC", "Fully Connected"),
            ("relu7", "FC", "ReLU"),
        ]
    if family == "standin":
        return [
            ("conv2", "2nd", "Convolution"),
            ("relu2", "2nd", "ReLU"),
            ("pool2", "2nd", "Max Pooling"),
            ("gap", "Final", "Average Pooling"),
        ]
    raise ValidationError(f"unknown backbone family {family!r}; expected one of {FAMILIES}")


@dataclass(frozen=True)
class BackboneSpec:
    family: str
    tap_layer: str | None = None
    input_side: int | None = None
    preprocessing: str = "mean_subtract"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown backbone family {self.family!r}; expected one of {FAMILIES}")
        if self.tap_layer is None:
            object.__setattr__(self, "tap_layer", DEFAULT_TAP[self.family])
        if self.input_side is None:
            object.__setattr__(self, "input_side", 227 if self.family == "alexnet" else 224)
        if self.tap_layer not in layer_names(self.family):
            raise LayerNameError(self.tap_layer, layer_names(self.family))
        if self.input_side <= 0:
            raise ValidationError("input_side must be positive")
        if self.preprocessing not in PREPROCESSING:
            raise ValidationError(f"preprocessing must be one of {PREPROCESSING}")

    @property
    def key(self):
        return f"{self.family}-{self.tap_layer}"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class FeatureVector:
    image_id: str
    backbone: BackboneSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(self.values)):
            raise ValidationError(f"non-finite feature values for {self.image_id}")

    @property
    def dim(self):
        return self.values.size


# -- preprocessing ------------------------------------------------------------


def _resize(channel, side):
    if channel.shape == (side, side):
        return channel.astype(float)
    im = Image.fromarray(channel.astype(np.float32), mode="F")
    return np.asarray(im.resize((side, side), Image.BILINEAR), dtype=float)


def preprocess_array(image, spec):
    """Resize to ``input_side`` square, replicate gray to RGB, and normalize.

    ``image`` is on the 0..255 intensity scale, shape (H, W) or (H, W, 3).
    """
    image = np.asarray(image, dtype=float)
    if image.size == 0 or 0 in image.shape:
        raise ValidationError("zero-sized image")
    if image.ndim == 2:
        g = _resize(image, spec.input_side)
        out = np.repeat(g[:, :, None], 3, axis=2)
    elif image.ndim == 3 and image.shape[2] == 3:
        out = np.stack([_resize(image[:, :, c], spec.input_side) for c in range(3)], axis=2)
    else:
        raise ValidationError(f"expected grayscale or RGB image, got shape {image.shape}")
    if spec.preprocessing == "mean_subtract":
        return out - IMAGENET_MEAN
    return np.clip(out / 255.0, 0.0, 1.0)


def preprocess_image(record, spec):
    return preprocess_array(load_image(record.path), spec)


# -- stand-in backbone --------------------------------------------------------


def _conv_valid(x, w, b):
    # x: (N, H, W, C), w: (k, k, C, F)
    k = w.shape[0]
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # (N, H', W', C, k, k)
    return np.einsum("nhwcij,ijcf->nhwf", win, w, optimize=True) + b


def _maxpool2(x):
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, : 2 * h2, : 2 * w2].reshape(n, h2, 2, w2, 2, c).max(axis=(2, 4))


def _avgpool(x, f):
    n, h, w, c = x.shape
    h2, w2 = h // f, w // f
    return x[:, : f * h2, : f * w2].reshape(n, h2, f, w2, f, c).mean(axis=(2, 4))


class StandInBackbone:
    """Tiny fixed-weight convolutional network standing in for a pretrained model."""

    family = "standin"

    def __init__(self, weights):
        self.weights = {k: np.array(v, dtype=float) for k, v in weights.items()}
        for v in self.weights.values():
            v.setflags(write=False)

    @classmethod
    def from_seed(cls, seed=0):
        rng = np.random.default_rng(seed)
        return cls(
            {
                "conv1_w": rng.normal(0, np.sqrt(2 / 27), size=(3, 3, 3, 8)),
                "conv1_b": np.zeros(8),
                "conv2_w": rng.normal(0, np.sqrt(2 / 72), size=(3, 3, 8, 16)),
                "conv2_b": np.zeros(16),
            }
        )

    @classmethod
    def from_file(cls, path):
        with np.load(path) as data:
            return cls(dict(data))

    def save(self, path):
        np.savez(path, **self.weights)

    def checksum(self):
        h = hashlib.sha256()
        for k in sorted(self.weights):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.weights[k]).tobytes())
        return h.hexdigest()

    def forward(self, batch, tap_layer):
        """batch: (N, S, S, 3) preprocessed images -> (N, D) features at ``tap_layer``."""
        if tap_layer not in _STANDIN_LAYERS:
            raise LayerNameError(tap_layer, _STANDIN_LAYERS)
        w = self.weights
        x = _avgpool(np.asarray(batch, dtype=float) / 64.0, 4)
        x = _conv_valid(x, w["conv1_w"], w["conv1_b"])
        outputs = {"conv1": x}
        x = np.maximum(x, 0)
        outputs["relu1"] = x
        x = _maxpool2(x)
        outputs["pool1"] = x
        x = _conv_valid(x, w["conv2_w"], w["conv2_b"])
        outputs["conv2"] = x
        x = np.maximum(x, 0)
        outputs["relu2"] = x
        x = _maxpool2(x)
        outputs["pool2"] = x
        outputs["gap"] = x.mean(axis=(1, 2))
        out = outputs[tap_layer]
        return out.reshape(out.shape[0], -1)


# -- torchvision backbones ----------------------------------------------------


def _torch_block_index(family):
    """Map MatConvNet ResNet block names to (torchvision layer attr, index)."""
    index = {}
    for stage_i, stage in enumerate(_resnet_block_names(family), start=1):
        for j, blk in enumerate(stage):
            index[blk] = (f"layer{stage_i}", j)
    return index


class TorchBackbone:
    """torchvision model with forward hooks at MatConvNet-named layers."""

    def __init__(self, family, model):
        import torch

        self.family = family
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self._torch = torch

    @classmethod
    def load(cls, family, weights_source):
        try:
            import torch
            import torchvision
        except ImportError as exc:
            raise ConfigurationError(f"backbone {family} needs torch and torchvision installed") from exc
        ctor = getattr(torchvision.models, family)
        if weights_source.startswith("random:"):
            torch.manual_seed(int(weights_source.split(":", 1)[1]))
            return cls(family, ctor(weights=None))
        if weights_source.startswith("torchvision:"):
            try:
                return cls(family, ctor(weights=weights_source.split(":", 1)[1]))
            except Exception as exc:
                raise ConfigurationError(f"cannot fetch {family} weights {weights_source}: {exc}") from exc
        path = Path(weights_source)
        if not path.exists():
            raise ConfigurationError(f"weights file {path} not found")
        model = ctor(weights=None)
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
        except Exception as exc:
            raise ConfigurationError(f"cannot load {family} weights from {path}: {exc}") from exc
        return cls(family, model)

    def checksum(self):
        h = hashlib.sha256()
        for k, v in sorted(self.model.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def _hook_target(self, tap_layer):
        """(module, mode, call_index) for a hook capturing ``tap_layer``."""
        m = self.model
        if self.family.startswith("resnet"):
            if tap_layer in ("conv1", "conv1x", "conv1xx", "pool1", "pool5", "fc1000"):
                mod = {"conv1": m.conv1, "conv1x": m.bn1, "conv1xx": m.relu, "pool1": m.maxpool, "pool5": m.avgpool, "fc1000": m.fc}
                return mod[tap_layer], "out", 0
            blocks = _torch_block_index(self.family)
            base, _, rest = tap_layer.partition("_")
            if base.endswith("x") and base[:-1] in blocks and not rest:
                layer, j = blocks[base[:-1]]
                return getattr(m, layer)[j], "out", 0
            layer, j = blocks[base]
            block = getattr(m, layer)[j]
            if not rest:
                # the residual sum is the input of the block's third ReLU call
                return block.relu, "in", 2
            part = rest.replace("branch", "")
            bn = part.endswith("x")
            part = part.rstrip("x")
            if part == "1":
                return block.downsample[1 if bn else 0], "out", 0
            n = {"2a": 1, "2b": 2, "2c": 3}[part]
            return getattr(block, f"{'bn' if bn else 'conv'}{n}"), "out", 0
        if self.family.startswith("vgg"):
            feats = list(_vgg_layers(self.family))
            if tap_layer in feats[: feats.index("fc6")]:
                return m.features[feats.index(tap_layer)], "out", 0
            idx = {"fc6": 0, "relu6": 1, "fc7": 3, "relu7": 4, "fc8": 6}[tap_layer]
            return m.classifier[idx], "out", 0
        idx = {"conv1": 0, "relu1": 1, "pool1": 2, "conv2": 3, "relu2": 4, "pool2": 5, "conv3": 6, "relu3": 7,
               "conv4": 8, "relu4": 9, "conv5": 10, "relu5": 11, "pool5": 12}
        if tap_layer in idx:
            return m.features[idx[tap_layer]], "out", 0
        return m.classifier[{"fc6": 1, "relu6": 2, "fc7": 4, "relu7": 5, "fc8": 6}[tap_layer]], "out", 0

    def forward(self, batch, tap_layer, preprocessing="mean_subtract"):
        if tap_layer not in layer_names(self.family):
            raise LayerNameError(tap_layer, layer_names(self.family))
        torch = self._torch
        x = np.asarray(batch, dtype=float)
        if preprocessing == "mean_subtract":
            x = (x + IMAGENET_MEAN) / 255.0
        x = (x - TORCH_MEAN) / TORCH_STD
        module, mode, call_index = self._hook_target(tap_layer)
        captured = []

        def grab(t):
            captured.append(t.detach().clone())

        if mode == "out":
            handle = module.register_forward_hook(lambda mod, inp, out: grab(out))
        else:
            handle = module.register_forward_pre_hook(lambda mod, inp: grab(inp[0]))
        try:
            with torch.no_grad():
                self.model(torch.from_numpy(x.transpose(0, 3, 1, 2)).float())
        finally:
            handle.remove()
        out = captured[call_index]
        return out.reshape(out.shape[0], -1).numpy().astype(float)


# -- loading and extraction ---------------------------------------------------


@functools.lru_cache(maxsize=8)
def load_backbone(family, weights_source):
    """Resolve a weights locator to a backbone object (cached per process)."""
    if family == "standin":
        if weights_source in ("standin", "", None):
            return StandInBackbone.from_seed(0)
        if weights_source.startswith("standin:"):
            return StandInBackbone.from_seed(int(weights_source.split(":", 1)[1]))
        path = Path(weights_source)
        if not path.exists():
            raise ConfigurationError(f"weights file {path} not found")
        return StandInBackbone.from_file(path)
    if family not in FAMILIES:
        raise ValidationError(f"unknown backbone family {family!r}")
    if not weights_source:
        raise ConfigurationError(f"no weights source given for {family}")
    return TorchBackbone.load(family, weights_source)


def run_backbone(backbone, spec, batch):
    if isinstance(backbone, TorchBackbone):
        return backbone.forward(batch, spec.tap_layer, spec.preprocessing)
    return backbone.forward(batch, spec.tap_layer)


class FeatureCache:
    """On-disk cache of feature vectors keyed by image, family, tap layer and weights checksum."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, image_id, spec, checksum):
        key = json.dumps([image_id, spec.family, spec.tap_layer, spec.input_side, spec.preprocessing, checksum])
        return self.root / f"{hashlib.sha256(key.encode()).hexdigest()}.npy"

    def get(self, image_id, spec, checksum):
        p = self._path(image_id, spec, checksum)
        return np.load(p) if p.exists() else None

    def put(self, image_id, spec, checksum, values):
        np.save(self._path(image_id, spec, checksum), values)


def extract_features(records, spec, weights_source, cache_dir=None, batch_size=16, backbone=None):
    """One FeatureVector per record, in input order; backbone weights stay untouched."""
    backbone = backbone or load_backbone(spec.family, weights_source)
    before = backbone.checksum()
    cache = FeatureCache(cache_dir) if cache_dir else None
    results = {}
    pending = []
    for r in records:
        cached = cache.get(r.id, spec, before) if cache else None
        if cached is not None:
            results[r.id] = cached
        else:
            pending.append(r)
    for start in range(0, len(pending), batch_size):
        chunk = pending[start : start + batch_size]
        batch = np.stack([preprocess_image(r, spec) for r in chunk])
        feats = run_backbone(backbone, spec, batch)
        for r, f in zip(chunk, feats):
            results[r.id] = f
            if cache:
                cache.put(r.id, spec, before, f)
    if backbone.checksum() != before:
        raise RuntimeError("backbone weights changed during extraction")
    vectors = [FeatureVector(r.id, spec, results[r.id]) for r in records]
    if len({v.dim for v in vectors}) > 1:
        raise ValidationError("feature dimensions differ within one backbone spec")
    return vectors


def features_for_arrays(images, spec, backbone, batch_size=16):
    """Features for in-memory images (0..255 scale); used by occlusion probing, never cached."""
    out = []
    for start in range(0, len(images), batch_size):
        batch = np.stack([preprocess_array(im, spec) for im in images[start : start + batch_size]])
        out.append(run_backbone(backbone, spec, batch))
    return np.concatenate(out, axis=0)


# -- feature store ------------------------------------------------------------

FEATURE_STORE_VERSION = 1


def write_feature_store(path, vectors):
    """CSV feature store: a ``#``-prefixed JSON header line, then image_id,dim,v0..vN rows."""
    if not vectors:
        raise ValidationError("no feature vectors to write")
    spec = vectors[0].backbone
    dim = vectors[0].dim
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps({"format": "cxrlab-features", "version": FEATURE_STORE_VERSION, "backbone": spec.to_dict()}) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["image_id", "dim"] + [f"v{i}" for i in range(dim)])
        for v in vectors:
            writer.writerow([v.image_id, v.dim] + [repr(float(x)) for x in v.values])


def read_feature_store(path):
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ValidationError(f"{path}: missing feature-store header")
        meta = json.loads(first[2:])
        if meta.get("format") != "cxrlab-features" or meta.get("version") != FEATURE_STORE_VERSION:
            raise ValidationError(f"{path}: unsupported feature-store format {meta.get('format')} v{meta.get('version')}")
        spec = BackboneSpec.from_dict(meta["backbone"])
        reader = csv.reader(fh)
        next(reader)
        out = []
        for row in reader:
            values = np.array([float(x) for x in row[2:]])
            if values.size != int(row[1]):
                raise ValidationError(f"{path}:{reader.line_num}: dim mismatch for {row[0]}")
            out.append(FeatureVector(row[0], spec, values))
    return out


# -- external scorer ----------------------------------------------------------


class ExternalScorer:
    """Child process speaking the line protocol: image path in, probability out."""

    def __init__(self, command):
        self.command = list(command)
        self.proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1)
        self._tmp = tempfile.TemporaryDirectory(prefix="cxrlab-scorer-")
        self._counter = 0

    def score_path(self, path):
        if self.proc.poll() is not None:
            raise ScorerError(f"external scorer exited with code {self.proc.returncode}")
        self.proc.stdin.write(f"{path}\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        try:
            p = float(line.strip())
        except ValueError:
            raise ScorerError(f"external scorer returned {line!r} for {path}") from None
        if not 0.0 <= p <= 1.0:
            raise ScorerError(f"external scorer returned out-of-range probability {p}")
        return p

    def __call__(self, image):
        self._counter += 1
        path = Path(self._tmp.name) / f"probe{self._counter}.png"
        Image.fromarray(np.clip(np.rint(image), 0, 255).astype(np.uint8)).save(path)
        try:
            return self.score_path(path)
        finally:
            path.unlink(missing_ok=True)

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=10)
        self._tmp.cleanup()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

