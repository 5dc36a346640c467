"""Command-line entry points.

Every stage reads one YAML config, writes its artifacts under
``output_dir`` and refreshes ``run_manifest.json`` (config hash, input and
output file hashes, library versions). Stages communicate only through files,
so any stage can be rerun on its own.

Exit codes: 0 success, 1 validation/configuration, 2 I/O, 3 numerical.
"""

import argparse
import copy
import csv
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .backbones import BackboneSpec, extract_features, list_candidate_layers, load_backbone, write_feature_store
from .datasets import MASK_NAMES, DatasetManifest, SplitSpec, load_image, load_manifest, load_mask, make_balanced_split, save_mask
from .ensemble import (
    EnsemblePool,
    SubsetStatsAccumulator,
    average_probabilities,
    evaluate_all_subsets,
    export_subset_results,
    tune_threshold,
    write_size_stats_json,
)
from .errors import (
    ConfigurationError,
    CxrLabError,
    DegenerateSegmentationError,
    InfeasibleTargetError,
    MissingInputError,
    ValidationError,
)
from .heads import (
    HeadConfig,
    TrainedHead,
    backbone_feature_fn,
    fuse_features,
    predict_proba,
    run_layer_study,
    run_multi_seed,
    run_size_sweep,
    train_and_evaluate,
    train_head,
)
from .localization import (
    AveragingScorer,
    HeadScorer,
    OcclusionConfig,
    average_histograms,
    heatmap_histogram,
    occlusion_map,
    write_heatmap,
)
from .metrics import evaluate, format_summary_row, operating_point, roc_auc, summary_to_dict
from .records import read_records_csv, write_records_csv
from .rulebased import resize_image, resize_mask

log = logging.getLogger("cxrlab")

DEFAULTS = {
    "output_dir": "results",
    "cache_dir": None,
    "dataset": {"source": "indiana", "root": None, "include_lateral": False},
    "experiment": {"abnormality": "cardiomegaly", "n_train": 282, "n_test": 50, "seeds": 9, "threshold": 0.5},
    "backbones": [
        {"family": "resnet152", "tap_layer": None, "weights": "torchvision:DEFAULT", "preprocessing": "mean_subtract",
         "input_side": None, "dropout": [0.0]},
    ],
    "head": {"learning_rate": 0.001, "epochs": 50, "batch_size": 32},
    "operating_points": {"sensitivity": 0.98, "specificity": 0.98},
    "layer_study": {"enabled": False, "family": "resnet152", "layers": None, "weights": "torchvision:DEFAULT", "seeds": 9},
    "size_sweep": {"enabled": False, "sizes": [25, 50, 100, 200, 282], "seeds": 3, "backbone": 0},
    "ensemble": {"enabled": True, "split_seed": 0, "members": None, "subsets": True, "sample_per_size": None,
                 "roc_members": None},
    "localization": {"enabled": False, "patch_side": 40, "stride": 16, "fill": 0.0, "keep_fraction": 0.2,
                     "mode": "cells", "roi": "none", "resize_to": 224, "max_images": 10, "models": None},
    "rulebased": {"enabled": False, "atlas_source": "jsrt", "atlas_root": None, "k": 5, "size": 128,
                  "use_gold_masks": False, "fusion": False, "svm_C": 1.0},
    "tb": {"enabled": False, "source": "shenzhen", "root": None, "abnormality": "tuberculosis", "n_train": 276,
           "n_test": 50, "split_seed": 0, "backbones": None, "fixed_threshold": 0.74},
}

PRESETS = {
    "synthetic": {
        "output_dir": "results-synthetic",
        "dataset": {"source": "synthetic", "root": "data/synthetic"},
        "experiment": {"n_train": 20, "n_test": 10, "seeds": 2},
        "backbones": [
            {"family": "standin", "tap_layer": "pool2", "weights": "standin:0", "dropout": [0.0, 0.5]},
            {"family": "standin", "tap_layer": "gap", "weights": "standin:0", "dropout": [0.0]},
        ],
        "localization": {"enabled": True, "stride": 16, "max_images": 2, "roi": "masks"},
    },
    "cardiomegaly": {},
    "edema": {"experiment": {"abnormality": "pulmonary_edema", "n_train": 30, "n_test": 15, "seeds": 15},
              "backbones": [{"family": "resnet50", "weights": "torchvision:DEFAULT"}],
              "localization": {"enabled": True, "roi": "rulebased"}},
    "tb": {"tb": {"enabled": True}},
}

STAGES = ("ingest", "extract", "train", "evaluate", "ensemble", "localize", "rulebased", "tb", "report")


# -- configuration ------------------------------------------------------------


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigurationError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def _backbone_defaults(entry):
    base = DEFAULTS["backbones"][0]
    unknown = set(entry) - set(base)
    if unknown:
        raise ConfigurationError(f"unknown backbone keys {sorted(unknown)}")
    return {**base, **entry}


def resolve_config(raw=None):
    cfg = _merge(DEFAULTS, raw or {})
    cfg["backbones"] = [_backbone_defaults(b) for b in cfg["backbones"]]
    if cfg["tb"]["backbones"] is not None:
        cfg["tb"]["backbones"] = [_backbone_defaults(b) for b in cfg["tb"]["backbones"]]
    seeds = seed_list(cfg["experiment"]["seeds"])
    if cfg["ensemble"]["enabled"] and cfg["ensemble"]["split_seed"] not in seeds:
        raise ConfigurationError(f"ensemble.split_seed {cfg['ensemble']['split_seed']} is not among experiment.seeds")
    if not cfg["backbones"]:
        raise ConfigurationError("at least one backbone is required")
    return cfg


def load_config(path, output_dir=None):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
    cfg = resolve_config(raw)
    if output_dir:
        cfg["output_dir"] = str(output_dir)
    base = path.parent
    for section, key in (("dataset", "root"), ("rulebased", "atlas_root"), ("tb", "root"), (None, "output_dir"), (None, "cache_dir")):
        holder = cfg[section] if section else cfg
        if holder[key] and not Path(holder[key]).is_absolute():
            holder[key] = str((base / holder[key]).resolve())
    return cfg


def preset_config(name):
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return resolve_config(PRESETS[name])


def seed_list(seeds):
    return list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]


def dump_yaml(cfg, path):
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=False))


# -- shared helpers -----------------------------------------------------------


class Context:
    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.cache = Path(cfg["cache_dir"]) if cfg["cache_dir"] else self.out / "features"

    def path(self, *parts):
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def require(self, *rel):
        missing = [str(self.out / r) for r in rel if not (self.out / r).exists()]
        if missing:
            raise MissingInputError(missing)

    def manifest(self):
        self.require("manifest.json")
        return DatasetManifest.from_json(self.out / "manifest.json")

    def model_index(self):
        self.require("models/index.json")
        return json.loads((self.out / "models" / "index.json").read_text())


def spec_of(entry):
    return BackboneSpec(entry["family"], entry["tap_layer"], entry["input_side"], entry["preprocessing"])


def model_label(spec, dropout_p):
    return spec.key + (f"-do{dropout_p:g}" if dropout_p > 0 else "")


def head_config(cfg, dropout_p, seed=0):
    h = cfg["head"]
    return HeadConfig(learning_rate=h["learning_rate"], dropout_p=dropout_p, epochs=h["epochs"], batch_size=h["batch_size"], seed=seed)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _operating_points(curve, cfg):
    out = {}
    for target in ("sensitivity", "specificity"):
        value = cfg["operating_points"][target]
        try:
            out[target] = operating_point(curve, target, value)._asdict()
        except InfeasibleTargetError as exc:
            out[target] = {"infeasible": True, "target": value, "best_achievable": exc.best_achievable}
    return out


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- stages -------------------------------------------------------------------


def stage_ingest(ctx):
    d = ctx.cfg["dataset"]
    if not d["root"]:
        raise ConfigurationError("dataset.root is not set")
    manifest = load_manifest(d["root"], d["source"])
    manifest.to_json(ctx.path("manifest.json"))
    log.info("ingested %d records from %s", len(manifest), d["root"])
    return manifest


def _splits(ctx, manifest):
    exp = ctx.cfg["experiment"]
    out = []
    for s in seed_list(exp["seeds"]):
        sp = make_balanced_split(manifest, exp["abnormality"], exp["n_train"], exp["n_test"], s, ctx.cfg["dataset"]["include_lateral"])
        sp.to_json(ctx.path("splits", f"{exp['abnormality']}-s{s}.json"))
        out.append(sp)
    return out


def stage_extract(ctx):
    manifest = ctx.manifest()
    splits = _splits(ctx, manifest)
    ids = sorted({i for sp in splits for i in sp.train_ids + sp.test_ids})
    records = [manifest[i] for i in ids]
    for entry in ctx.cfg["backbones"]:
        spec = spec_of(entry)
        vecs = extract_features(records, spec, entry["weights"], cache_dir=ctx.cache)
        write_feature_store(ctx.path("features", f"{spec.key}.csv"), vecs)
        log.info("extracted %d x %d features for %s", len(vecs), vecs[0].dim, spec.key)


def _save_run(ctx, run, entry, dropout_p, index):
    mid = run.model_id
    run.head.to_json(ctx.path("models", f"{mid}.json"))
    write_records_csv(run.records, ctx.path("predictions", f"{mid}.csv"))
    run.report.to_json(ctx.path("metrics", f"{mid}.json"))
    index[mid] = {"backbone": run.head.backbone.to_dict(), "weights": entry["weights"], "dropout_p": dropout_p,
                  "seed": run.split.seed}


def stage_train(ctx):
    cfg = ctx.cfg
    exp = cfg["experiment"]
    manifest = ctx.manifest()
    _splits(ctx, manifest)
    index = {}
    rows = [["model", "accuracy", "auc", "sensitivity", "specificity"]]
    for entry in cfg["backbones"]:
        spec = spec_of(entry)
        fn = backbone_feature_fn(spec, entry["weights"], ctx.cache)
        for p in entry["dropout"]:
            label = model_label(spec, p)
            res = run_multi_seed(manifest, exp["abnormality"], spec, head_config(cfg, p), exp["seeds"], exp["n_train"],
                                 exp["n_test"], fn, cfg["dataset"]["include_lateral"], label)
            for run in res.runs:
                _save_run(ctx, run, entry, p, index)
            write_json(ctx.path("aggregate", f"{label}.json"), {"label": label, "summary": summary_to_dict(res.aggregate)})
            rows.append(format_summary_row(label, res.aggregate))
            log.info("trained %s over %d seeds", label, len(res.runs))
    write_json(ctx.path("models", "index.json"), index)
    with open(ctx.path("tables", "summary.csv"), "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    if cfg["layer_study"]["enabled"]:
        _layer_study(ctx, manifest)
    if cfg["size_sweep"]["enabled"]:
        _size_sweep(ctx, manifest)


def _layer_study(ctx, manifest):
    cfg = ctx.cfg
    ls = cfg["layer_study"]
    exp = cfg["experiment"]
    layers = ls["layers"] or [name for name, _, _ in list_candidate_layers(ls["family"])]
    out = run_layer_study(manifest, exp["abnormality"], ls["family"], layers, head_config(cfg, 0.0), ls["seeds"],
                          exp["n_train"], exp["n_test"], ls["weights"], ctx.cache)
    write_json(ctx.path("layer_study.json"),
               {"family": ls["family"], "layers": {l: summary_to_dict(r.aggregate) for l, r in out.items()}})


def _size_sweep(ctx, manifest):
    cfg = ctx.cfg
    sw = cfg["size_sweep"]
    exp = cfg["experiment"]
    entry = cfg["backbones"][sw["backbone"]]
    spec = spec_of(entry)
    fn = backbone_feature_fn(spec, entry["weights"], ctx.cache)
    out = run_size_sweep(manifest, exp["abnormality"], spec, head_config(cfg, 0.0), sw["sizes"], exp["n_test"],
                         seed_list(sw["seeds"]), fn, cfg["dataset"]["include_lateral"])
    write_json(ctx.path("size_sweep.json"),
               {"backbone": spec.to_dict(), "sizes": {str(s): summary_to_dict(r.aggregate) for s, r in sorted(out.items())}})


def stage_evaluate(ctx):
    ctx.require("predictions")
    t = ctx.cfg["experiment"]["threshold"]
    files = sorted((ctx.out / "predictions").glob("*.csv"))
    if not files:
        raise MissingInputError([str(ctx.out / "predictions" / "*.csv")])
    for f in files:
        recs = read_records_csv(f)
        report = evaluate(recs, t)
        curve, _ = roc_auc(recs)
        curve.to_csv(ctx.path("curves", f"{f.stem}.csv"))
        points = _operating_points(curve, ctx.cfg)
        write_json(ctx.path("operating_points", f"{f.stem}.json"),
                   {"model_id": f.stem, "threshold": t, "accuracy": report.accuracy, "auc": report.auc, **points})


def _ensemble_members(ctx):
    ens = ctx.cfg["ensemble"]
    index = ctx.model_index()
    if ens["members"]:
        missing = [m for m in ens["members"] if m not in index]
        if missing:
            raise ConfigurationError(f"ensemble members not trained: {missing}")
        return list(ens["members"])
    return sorted(m for m, info in index.items() if info["seed"] == ens["split_seed"])


def _write_roc(ctx, records, name):
    curve, auc = roc_auc(records)
    curve.to_csv(ctx.path("roc", f"{name}.csv"))
    write_json(ctx.path("roc", f"{name}.json"), {"model_id": name, "auc": auc})


def stage_ensemble(ctx):
    cfg = ctx.cfg
    ens = cfg["ensemble"]
    t = cfg["experiment"]["threshold"]
    members = _ensemble_members(ctx)
    if not members:
        raise ValidationError("no models available for the ensemble")
    ctx.require(*[f"predictions/{m}.csv" for m in members])
    recs = [r for m in members for r in read_records_csv(ctx.out / "predictions" / f"{m}.csv")]
    pool = EnsemblePool.from_records(recs, members)
    if ens["subsets"] and pool.size >= 2:
        acc = SubsetStatsAccumulator()
        n = export_subset_results(evaluate_all_subsets(pool, t, ens["sample_per_size"]), ctx.path("ensemble", "subsets.csv"), acc)
        write_size_stats_json(ctx.path("ensemble", "size_stats.json"), acc, pool.model_ids, ens["sample_per_size"] is not None)
        log.info("evaluated %d ensemble subsets", n)
    combined = average_probabilities(pool, members, model_id="ensemble")
    write_records_csv(combined, ctx.path("ensemble", "predictions.csv"))
    report = evaluate(combined, t, {"members": members, "split_seed": ens["split_seed"]})
    report.to_json(ctx.path("ensemble", "metrics.json"))
    curve, _ = roc_auc(combined)
    write_json(ctx.path("ensemble", "operating_points.json"), _operating_points(curve, cfg))
    for m in ens["roc_members"] or members:
        _write_roc(ctx, pool.member_records(m), m)
    _write_roc(ctx, combined, "ensemble")


def _roi_for(ctx, record, kind, size):
    if kind == "none":
        return None
    if kind == "masks":
        if not all(n in record.masks for n in ("lung_left", "lung_right")):
            raise ValidationError(f"record {record.id} has no lung masks for the ROI")
        roi = load_mask(record.masks["lung_left"]) | load_mask(record.masks["lung_right"])
    elif kind == "rulebased":
        seg_dir = ctx.out / "rulebased" / "segmentations"
        files = [seg_dir / f"{record.id}_{n}.png" for n in ("lung_left", "lung_right")]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise MissingInputError(missing)
        roi = load_mask(files[0]) | load_mask(files[1])
    else:
        raise ConfigurationError(f"unknown localization.roi {kind!r}")
    return resize_mask(roi, size)


def stage_localize(ctx):
    cfg = ctx.cfg
    loc = cfg["localization"]
    index = ctx.model_index()
    models = loc["models"] or _ensemble_members(ctx)
    groups = {}
    for m in models:
        ctx.require(f"models/{m}.json")
        head = TrainedHead.from_json(ctx.out / "models" / f"{m}.json")
        key = (json.dumps(index[m]["backbone"], sort_keys=True), index[m]["weights"])
        groups.setdefault(key, []).append(head)
    scorers = []
    for (spec_json, weights), heads in sorted(groups.items()):
        spec = BackboneSpec.from_dict(json.loads(spec_json))
        scorers.append(HeadScorer(spec, load_backbone(spec.family, weights), heads))
    scorer = scorers[0] if len(scorers) == 1 else AveragingScorer(scorers)
    manifest = ctx.manifest()
    seed = cfg["ensemble"]["split_seed"]
    abn = cfg["experiment"]["abnormality"]
    ctx.require(f"splits/{abn}-s{seed}.json")
    split = SplitSpec.from_json(ctx.out / "splits" / f"{abn}-s{seed}.json")
    hists = {"abnormal": [], "normal": []}
    for group, ids in (("abnormal", split.test_pos), ("normal", split.test_neg)):
        for image_id in ids[: loc["max_images"]]:
            rec = manifest[image_id]
            image = load_image(rec.path)
            size = loc["resize_to"] or image.shape
            image = resize_image(image, size)
            roi = _roi_for(ctx, rec, loc["roi"], image.shape)
            occ = OcclusionConfig(loc["patch_side"], loc["stride"], loc["fill"], roi, loc["keep_fraction"])
            hm = occlusion_map(image, scorer, occ, image_id=image_id)
            extra = {"label": 1 if group == "abnormal" else 0, "models": models}
            if roi is not None:
                save_mask(roi, ctx.path("localization", "heatmaps", f"{image_id}_roi.png"))
                extra["roi_file"] = f"{image_id}_roi.png"
            write_heatmap(hm, ctx.path("localization", "heatmaps", f"{image_id}.csv"), extra)
            hists[group].append(heatmap_histogram(hm))
    doc = {"groups": {g: average_histograms(h).to_dict() for g, h in hists.items() if h},
           "n_maps": {g: len(h) for g, h in hists.items()}}
    write_json(ctx.path("localization", "histograms.json"), doc)


def _rule_features_for(ctx, records, atlases, rb, cache):
    from .rulebased import Segmentation, compute_rule_features, segment_with_atlases

    feats = {}
    dropped = []
    for rec in records:
        if rb["use_gold_masks"] and all(n in rec.masks for n in MASK_NAMES):
            seg = Segmentation(rec.id, {n: resize_mask(load_mask(rec.masks[n]), rb["size"]) for n in MASK_NAMES}, ["gold"])
        else:
            seg = segment_with_atlases(rec, atlases, rb["k"], rb["size"], signature_cache=cache)
        seg.save(ctx.out / "rulebased" / "segmentations")
        try:
            feats[rec.id] = compute_rule_features(seg)
        except DegenerateSegmentationError as exc:
            log.warning("dropping %s: %s", rec.id, exc)
            dropped.append(rec.id)
    return feats, dropped


def stage_rulebased(ctx):
    from .rulebased import AtlasEntry, train_rule_classifier, write_rule_features

    cfg = ctx.cfg
    rb = cfg["rulebased"]
    if not rb["atlas_root"]:
        raise ConfigurationError("rulebased.atlas_root is not set")
    atlas_manifest = load_manifest(rb["atlas_root"], rb["atlas_source"])
    atlases = [AtlasEntry.from_record(r, rb["size"]) for r in atlas_manifest if all(n in r.masks for n in MASK_NAMES)]
    if len(atlases) < rb["k"]:
        raise ValidationError(f"only {len(atlases)} atlases with gold masks; need k={rb['k']}")
    manifest = ctx.manifest()
    seed = cfg["ensemble"]["split_seed"]
    abn = cfg["experiment"]["abnormality"]
    ctx.require(f"splits/{abn}-s{seed}.json")
    split = SplitSpec.from_json(ctx.out / "splits" / f"{abn}-s{seed}.json")
    ids = list(split.train_ids) + list(split.test_ids)
    feats, dropped = _rule_features_for(ctx, [manifest[i] for i in ids], atlases, rb, {})
    write_rule_features(ctx.path("rulebased", "features.json"), [feats[i] for i in ids if i in feats])
    train = [(i, y) for i, y in split.labelled("train") if i in feats]
    test = [(i, y) for i, y in split.labelled("test") if i in feats]
    clf = train_rule_classifier([feats[i] for i, _ in train], [y for _, y in train], seed, rb["svm_C"], f"rule_svm-s{seed}")
    clf.to_json(ctx.path("rulebased", "classifier.json"))
    records = clf.predict_proba([feats[i] for i, _ in test], dict(test))
    write_records_csv(records, ctx.path("rulebased", "predictions.csv"))
    t = cfg["experiment"]["threshold"]
    evaluate(records, t, {"model_id": clf.model_id, "split_seed": seed, "dropped": dropped}).to_json(ctx.path("rulebased", "metrics.json"))
    if rb["fusion"]:
        entry = cfg["backbones"][0]
        spec = spec_of(entry)
        dcn = backbone_feature_fn(spec, entry["weights"], ctx.cache)([manifest[i] for i in feats])
        fused = {i: fuse_features(dcn[i], feats[i]) for i in feats}
        head = train_head([fused[i] for i, _ in train], [y for _, y in train], head_config(cfg, 0.0, seed), spec,
                          model_id=f"{spec.key}+rule-s{seed}")
        frecs = predict_proba(head, [fused[i] for i, _ in test], dict(test))
        write_records_csv(frecs, ctx.path("rulebased", "fusion_predictions.csv"))
        evaluate(frecs, t, {"model_id": head.model_id, "split_seed": seed}).to_json(ctx.path("rulebased", "fusion_metrics.json"))


def stage_tb(ctx):
    cfg = ctx.cfg
    tb = cfg["tb"]
    if not tb["root"]:
        raise ConfigurationError("tb.root is not set")
    manifest = load_manifest(tb["root"], tb["source"])
    manifest.to_json(ctx.path("tb", "manifest.json"))
    split = make_balanced_split(manifest, tb["abnormality"], tb["n_train"], tb["n_test"], tb["split_seed"])
    split.to_json(ctx.path("tb", "split.json"))
    t = cfg["experiment"]["threshold"]
    recs, members = [], []
    for entry in tb["backbones"] or cfg["backbones"]:
        spec = spec_of(entry)
        ids = list(split.train_ids) + list(split.test_ids)
        feats = backbone_feature_fn(spec, entry["weights"], ctx.cache)([manifest[i] for i in ids])
        for p in entry["dropout"]:
            mid = f"{model_label(spec, p)}-s{split.seed}"
            run = train_and_evaluate(split, feats, head_config(cfg, p, split.seed), mid, spec, t)
            write_records_csv(run.records, ctx.path("tb", "predictions", f"{mid}.csv"))
            run.report.to_json(ctx.path("tb", "metrics", f"{mid}.json"))
            recs += run.records
            members.append(mid)
    pool = EnsemblePool.from_records(recs, members)
    combined = average_probabilities(pool, members, model_id="tb-ensemble")
    write_records_csv(combined, ctx.path("tb", "ensemble_predictions.csv"))
    evaluate(combined, t, {"members": members}).to_json(ctx.path("tb", "ensemble_metrics.json"))
    best_t, best_acc = tune_threshold(combined)
    # tuned on the test predictions themselves, as the reported 0.74 was; optimistic by construction
    write_json(ctx.path("tb", "threshold.json"), {"threshold": best_t, "accuracy": best_acc, "tuned_on": "test"})
    evaluate(combined, best_t, {"members": members, "tuned": True}).to_json(ctx.path("tb", "ensemble_metrics_tuned.json"))
    if tb["fixed_threshold"] is not None:
        evaluate(combined, tb["fixed_threshold"], {"members": members}).to_json(
            ctx.path("tb", f"ensemble_metrics_t{tb['fixed_threshold']:g}.json"))
    _write_roc(ctx, combined, "tb-ensemble")


def stage_report(ctx):
    from .report import render_report

    return render_report(ctx.out)


STAGE_FUNCS = {
    "ingest": stage_ingest,
    "extract": stage_extract,
    "train": stage_train,
    "evaluate": stage_evaluate,
    "ensemble": stage_ensemble,
    "localize": stage_localize,
    "rulebased": stage_rulebased,
    "tb": stage_tb,
    "report": stage_report,
}


def stages_for_all(cfg):
    out = ["ingest", "extract", "train", "evaluate"]
    if cfg["ensemble"]["enabled"]:
        out.append("ensemble")
    if cfg["rulebased"]["enabled"]:
        out.append("rulebased")
    if cfg["localization"]["enabled"]:
        out.append("localize")
    if cfg["tb"]["enabled"]:
        out.append("tb")
    out.append("report")
    return out


# -- run manifest -------------------------------------------------------------


def write_run_manifest(ctx, stages):
    import matplotlib
    import scipy
    import sklearn

    cfg_text = yaml.safe_dump(ctx.cfg, sort_keys=True)
    inputs = {}
    manifest_path = ctx.out / "manifest.json"
    if manifest_path.exists():
        inputs["manifest.json"] = sha256(manifest_path)
    for entry in ctx.cfg["backbones"]:
        w = entry["weights"]
        if Path(w).is_file():
            inputs[w] = sha256(w)
    outputs = {}
    for p in sorted(ctx.out.rglob("*")):
        rel = p.relative_to(ctx.out)
        if p.is_file() and rel.parts[0] != "features" and rel.name != "run_manifest.json":
            outputs[str(rel)] = sha256(p)
    doc = {
        "cxrlab": __version__,
        "stages": stages,
        "config_sha256": hashlib.sha256(cfg_text.encode()).hexdigest(),
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
                     "scikit-learn": sklearn.__version__, "matplotlib": matplotlib.__version__},
        "inputs": inputs,
        "outputs": outputs,
    }
    write_json(ctx.out / "run_manifest.json", doc)


# -- entry point --------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="cxrlab", description="Chest X-ray abnormality experiment harness.")
    p.add_argument("--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES + ("all",):
        s = sub.add_parser(name, help=f"run the {name} stage" if name != "all" else "run every enabled stage")
        s.add_argument("--config", required=name != "report", help="YAML config file")
        s.add_argument("--output-dir", help="override output_dir from the config")
        if name == "report":
            s.add_argument("result_dir", nargs="?", help="result directory (instead of --config)")
    s = sub.add_parser("init-config", help="write a config file with every default filled in")
    s.add_argument("path")
    s.add_argument("--preset", default="cardiomegaly", choices=sorted(PRESETS))
    s = sub.add_parser("make-synthetic", help="write a synthetic dataset with lung/heart masks")
    s.add_argument("root")
    s.add_argument("--n-normal", type=int, default=40)
    s.add_argument("--n-cardiomegaly", type=int, default=40)
    s.add_argument("--n-edema", type=int, default=0)
    s.add_argument("--side", type=int, default=224)
    s.add_argument("--seed", type=int, default=0)
    return p


def _run(args):
    if args.command == "init-config":
        dump_yaml(preset_config(args.preset), args.path)
        return
    if args.command == "make-synthetic":
        from .synthetic import make_synthetic_dataset

        make_synthetic_dataset(args.root, args.n_normal, args.n_cardiomegaly, args.n_edema, 0, args.side, args.seed)
        return
    if args.command == "report" and not args.config:
        if not args.result_dir:
            raise ConfigurationError("report needs --config or a result directory")
        from .report import render_report

        yield "report"
        render_report(args.result_dir)
        return
    cfg = load_config(args.config, args.output_dir)
    ctx = Context(cfg)
    dump_yaml(cfg, ctx.out / "config.resolved.yaml")
    stages = stages_for_all(cfg) if args.command == "all" else [args.command]
    done = []
    try:
        for stage in stages:
            yield stage
            log.info("stage %s", stage)
            STAGE_FUNCS[stage](ctx)
            done.append(stage)
    finally:
        write_run_manifest(ctx, done)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        for stage in _run(args) or ():
            pass
    except CxrLabError as exc:
        print(f"cxrlab: stage {stage} failed: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"cxrlab: stage {stage} failed (I/O): {exc}", file=sys.stderr)
        return 2
    except ArithmeticError as exc:
        print(f"cxrlab: stage {stage} failed (numerical): {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"cxrlab: stage {stage} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
