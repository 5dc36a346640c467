"""Binary classifier heads over frozen features, and the experiments built on them.

The head is a single affine layer with a two-way softmax (index 1 = abnormal),
trained with Adam on mean cross-entropy. Optional inverted dropout is applied
to the input features during training only.
"""

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .backbones import BackboneSpec, FeatureVector, extract_features
from .datasets import make_balanced_split, make_size_sweep
from .errors import NumericalError, ValidationError
from .metrics import evaluate, summarize_runs
from .records import ProbabilityRecord

DEFAULT_DROPOUT_P = 0.5


@dataclass(frozen=True)
class HeadConfig:
    learning_rate: float = 0.001
    dropout_p: float = 0.0
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_scale: float = 0.01

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError("dropout_p must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")

    @classmethod
    def dropout_variant(cls, **kw):
        kw.setdefault("dropout_p", DEFAULT_DROPOUT_P)
        return cls(**kw)


@dataclass
class TrainedHead:
    weights: np.ndarray  # (dim, 2)
    bias: np.ndarray  # (2,)
    config: HeadConfig
    backbone: BackboneSpec | None = None
    split: dict | None = None
    model_id: str = "head"
    initial_loss: float = float("nan")
    loss_history: list = field(default_factory=list)

    @property
    def dim(self):
        return self.weights.shape[0]

    def logits(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ValidationError(f"feature dim {X.shape[-1]} does not match head dim {self.dim}")
        return X @ self.weights + self.bias

    def proba(self, X):
        """p_abnormal for each row of X."""
        z = self.logits(X)
        return _sigmoid(z[:, 1] - z[:, 0])

    def to_dict(self):
        return {
            "model_id": self.model_id,
            "config": asdict(self.config),
            "backbone": self.backbone.to_dict() if self.backbone else None,
            "split": self.split,
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "initial_loss": self.initial_loss,
            "loss_history": list(self.loss_history),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            weights=np.array(d["weights"], dtype=float).reshape(-1, 2),
            bias=np.array(d["bias"], dtype=float),
            config=HeadConfig(**d["config"]),
            backbone=BackboneSpec.from_dict(d["backbone"]) if d.get("backbone") else None,
            split=d.get("split"),
            model_id=d.get("model_id", "head"),
            initial_loss=d.get("initial_loss", float("nan")),
            loss_history=list(d.get("loss_history", [])),
        )

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softmax_xent(z, y):
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(y.size), y].mean(), np.exp(logp)


def _as_matrix(features):
    if isinstance(features, np.ndarray):
        return features.astype(float, copy=False)
    dims = {f.dim for f in features}
    if len(dims) != 1:
        raise ValidationError(f"feature dims differ: {sorted(dims)}")
    return np.stack([f.values for f in features])


def train_head(features, labels, config=HeadConfig(), backbone=None, split=None, model_id="head"):
    """Fit the softmax head with minibatch Adam; deterministic given ``config.seed``."""
    X = _as_matrix(features)
    y = np.asarray(labels, dtype=int)
    if X.shape[0] != y.size:
        raise ValidationError("features and labels differ in length")
    if set(np.unique(y)) != {0, 1}:
        raise ValidationError("training needs at least one sample of each class")
    if X.nbytes > 256 * 2**20:
        X = X.astype(np.float32)
    n, d = X.shape
    rng = np.random.default_rng(config.seed)
    W = rng.normal(0.0, config.init_scale, size=(d, 2))
    b = np.zeros(2)
    mW, vW = np.zeros_like(W), np.zeros_like(W)
    mb, vb = np.zeros_like(b), np.zeros_like(b)
    onehot = np.eye(2)[y]
    initial_loss, _ = _softmax_xent(X @ W + b, y)
    history = []
    step = 0
    keep = 1.0 - config.dropout_p
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = X[idx]
            if config.dropout_p > 0:
                xb = xb * (rng.random(xb.shape) < keep) / keep
            loss, prob = _softmax_xent(xb @ W + b, y[idx])
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            total += loss * idx.size
            g = (prob - onehot[idx]) / idx.size
            gW = xb.T @ g
            gb = g.sum(axis=0)
            step += 1
            c1 = 1.0 - config.beta1**step
            c2 = 1.0 - config.beta2**step
            for p, grad, m, v in ((W, gW, mW, vW), (b, gb, mb, vb)):
                m *= config.beta1
                m += (1 - config.beta1) * grad
                v *= config.beta2
                v += (1 - config.beta2) * grad * grad
                p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
        history.append(total / n)
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
        raise NumericalError(f"non-finite head weights after epoch {config.epochs - 1}")
    return TrainedHead(W, b, config, backbone, split, model_id, float(initial_loss), history)


def predict_proba(head, features, labels):
    """ProbabilityRecords for ``features`` (FeatureVectors); ``labels`` maps image id -> 0/1."""
    p = head.proba(_as_matrix(features))
    if not isinstance(labels, dict):
        labels = {f.image_id: int(y) for f, y in zip(features, labels)}
    return [ProbabilityRecord(f.image_id, head.model_id, float(pi), int(labels[f.image_id])) for f, pi in zip(features, p)]


def fuse_features(dcn, rule):
    """Append the (ctr_1d, ctr_2d, ctar) triple to a DCN feature vector."""
    rule_id = getattr(rule, "image_id", None)
    if rule_id is not None and rule_id != dcn.image_id:
        raise ValidationError(f"image id mismatch: {dcn.image_id!r} vs {rule_id!r}")
    tail = np.array([rule.ctr_1d, rule.ctr_2d, rule.ctar], dtype=float)
    return FeatureVector(dcn.image_id, dcn.backbone, np.concatenate([dcn.values, tail]))


# -- experiments --------------------------------------------------------------


def backbone_feature_fn(spec, weights_source, cache_dir=None):
    """Feature lookup backed by a frozen backbone: records -> {id: FeatureVector}."""

    def fn(records):
        return {v.image_id: v for v in extract_features(records, spec, weights_source, cache_dir=cache_dir)}

    return fn


@dataclass
class RunResult:
    model_id: str
    split: object
    head: TrainedHead
    records: list
    report: object


def train_and_evaluate(split, features, config, model_id, backbone=None, threshold=0.5, metadata=None):
    """Train on the split's training ids and evaluate on its test ids."""
    train = split.labelled("train")
    test = split.labelled("test")
    head = train_head(
        [features[i] for i, _ in train],
        [y for _, y in train],
        config,
        backbone=backbone,
        split={"abnormality": split.abnormality, "seed": split.seed, "n_train": len(split.train_pos)},
        model_id=model_id,
    )
    records = predict_proba(head, [features[i] for i, _ in test], dict(test))
    meta = {"model_id": model_id, "abnormality": split.abnormality, "split_seed": split.seed,
            "n_train_per_class": len(split.train_pos), "n_test_per_class": len(split.test_pos),
            "head_config": asdict(config)}
    if backbone is not None:
        meta["backbone"] = backbone.to_dict()
    meta.update(metadata or {})
    return RunResult(model_id, split, head, records, evaluate(records, threshold, meta))


def _gather(manifest, splits, feature_fn):
    ids = sorted({i for s in splits for i in s.train_ids + s.test_ids})
    return feature_fn([manifest[i] for i in ids])


@dataclass
class MultiSeedResult:
    runs: list
    aggregate: dict

    @property
    def reports(self):
        return [r.report for r in self.runs]


def run_multi_seed(manifest, abnormality, backbone, config, seeds, n_train, n_test, feature_fn, include_lateral=False, label=None):
    """One balanced split and one head per seed; aggregate mean and sd of the test metrics.

    ``seeds`` may be an int (seeds 0..n-1) or an explicit list.
    """
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if not seeds:
        raise ValidationError("need at least one seed")
    splits = [make_balanced_split(manifest, abnormality, n_train, n_test, s, include_lateral) for s in seeds]
    features = _gather(manifest, splits, feature_fn)
    prefix = label or (backbone.key if backbone else "head")
    runs = [
        train_and_evaluate(sp, features, replace(config, seed=sp.seed), f"{prefix}-s{sp.seed}", backbone)
        for sp in splits
    ]
    return MultiSeedResult(runs, summarize_runs([r.report for r in runs]))


def run_size_sweep(manifest, abnormality, backbone, config, sizes, n_test, seeds, feature_fn, include_lateral=False):
    """Aggregate metrics per training-set size: {size: MultiSeedResult}."""
    splits = make_size_sweep(manifest, abnormality, sizes, n_test, seeds, include_lateral)
    features = _gather(manifest, splits, feature_fn)
    by_size = {}
    prefix = backbone.key if backbone else "head"
    for sp in splits:
        size = len(sp.train_pos)
        run = train_and_evaluate(sp, features, replace(config, seed=sp.seed), f"{prefix}-n{size}-s{sp.seed}", backbone)
        by_size.setdefault(size, []).append(run)
    return {size: MultiSeedResult(runs, summarize_runs([r.report for r in runs])) for size, runs in by_size.items()}


def run_layer_study(manifest, abnormality, family, layers, config, seeds, n_train, n_test, weights_source, cache_dir=None,
                    preprocessing="mean_subtract", input_side=None):
    """One aggregate metrics row per candidate tap layer: {layer: MultiSeedResult}."""
    out = {}
    for layer in layers:
        spec = BackboneSpec(family, layer, input_side, preprocessing)
        fn = backbone_feature_fn(spec, weights_source, cache_dir)
        out[layer] = run_multi_seed(manifest, abnormality, spec, config, seeds, n_train, n_test, fn)
    return out
