"""Figure rendering from a result directory.

Every plotted number is read from a serialized artifact; nothing is
recomputed here apart from laying out what the files already contain.

Inputs looked for (relative to the result directory):

    roc/<name>.csv + roc/<name>.json     ROC overlay (AUC legend from the JSON)
    ensemble/size_stats.json             subset-size boxplots
    layer_study.json                     layer-study bar chart
    size_sweep.json                      training-size curves with error bars
    localization/histograms.json         heat-map histogram bars
    localization/heatmaps/*.csv          overlay images (with manifest.json)
"""

import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .datasets import DatasetManifest, load_image, load_mask  # noqa: E402
from .ensemble import read_size_stats_json  # noqa: E402
from .errors import MissingInputError  # noqa: E402
from .localization import Histogram, binarize_lowest_fraction, mask_to_pixels, read_heatmap, render_overlay  # noqa: E402
from .metrics import RocCurve  # noqa: E402
from .rulebased import resize_image  # noqa: E402

log = logging.getLogger(__name__)

EXPECTED = (
    "roc/*.csv",
    "ensemble/size_stats.json",
    "layer_study.json",
    "size_sweep.json",
    "localization/histograms.json",
    "localization/heatmaps/*.csv",
)
PLOT_METRICS = ("accuracy", "auc", "sensitivity", "specificity")


def _save(fig, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def _trapezoid_area(curve):
    # area of the stored polyline; used only when no metrics sidecar exists
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2))


def plot_roc_overlay(roc_dir, out):
    """One figure with every curve in ``roc_dir`` and an AUC legend."""
    files = sorted(Path(roc_dir).glob("*.csv"))
    if not files:
        raise MissingInputError([str(Path(roc_dir) / "*.csv")])
    fig, ax = plt.subplots(figsize=(5.5, 5))
    for f in files:
        curve = RocCurve.from_csv(f)
        side = f.with_suffix(".json")
        auc = json.loads(side.read_text())["auc"] if side.exists() else _trapezoid_area(curve)
        ax.plot(curve.fpr, curve.tpr, label=f"{f.stem} (AUC {auc:.4f})")
    ax.plot([0, 1], [0, 1], color="0.7", linestyle=":", linewidth=1)
    ax.set(xlabel="1 - specificity", ylabel="sensitivity", xlim=(0, 1), ylim=(0, 1.01), title="ROC")
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, Path(out))


def plot_subset_boxplots(stats_path, out_dir):
    """One boxplot per metric, one box per subset size (whiskers at min/max)."""
    doc = read_size_stats_json(stats_path)
    written = []
    for metric, per_size in doc["stats"].items():
        sizes = sorted(per_size)
        boxes = [
            {"label": str(s), "whislo": per_size[s].min, "q1": per_size[s].q25, "med": per_size[s].median,
             "q3": per_size[s].q75, "whishi": per_size[s].max, "fliers": []}
            for s in sizes
        ]
        fig, ax = plt.subplots(figsize=(max(5, 0.35 * len(sizes) + 2), 4))
        ax.bxp(boxes, showfliers=False)
        title = f"ensemble {metric} by subset size" + (" (sampled)" if doc["sampled"] else "")
        ax.set(xlabel="number of models", ylabel=metric, title=title)
        written.append(_save(fig, Path(out_dir) / f"ensemble_{metric}_boxplot.png"))
    return written


def plot_layer_study(path, out):
    """Grouped bars of mean metric per tap layer with sd error bars."""
    doc = json.loads(Path(path).read_text())
    layers = list(doc["layers"])
    width = 0.8 / len(PLOT_METRICS)
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(layers) + 2), 4))
    x = np.arange(len(layers))
    for k, m in enumerate(PLOT_METRICS):
        means = [doc["layers"][l][m]["mean"] for l in layers]
        sds = [doc["layers"][l][m]["sd"] for l in layers]
        ax.bar(x + (k - 1.5) * width, means, width, yerr=sds, capsize=2, label=m)
    ax.set_xticks(x, layers, rotation=30, ha="right", fontsize=8)
    ax.set(ylim=(0, 1.05), ylabel="mean over seeds", title=f"layer study: {doc.get('family', '')}")
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    return _save(fig, Path(out))


def plot_size_sweep(path, out):
    """Accuracy and AUC versus per-class training size, mean with sd error bars."""
    doc = json.loads(Path(path).read_text())
    sizes = sorted(int(s) for s in doc["sizes"])
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for m in ("accuracy", "auc"):
        means = [doc["sizes"][str(s)][m]["mean"] for s in sizes]
        sds = [doc["sizes"][str(s)][m]["sd"] for s in sizes]
        ax.errorbar(sizes, means, yerr=sds, marker="o", capsize=3, label=m)
    ax.set(xlabel="training images per class", ylabel="mean over seeds", title="training-set size")
    ax.legend()
    return _save(fig, Path(out))


def plot_histograms(path, out_dir):
    """Average heat-map histograms, one figure per group (e.g. abnormal / normal)."""
    doc = json.loads(Path(path).read_text())
    written = []
    for group, d in sorted(doc["groups"].items()):
        h = Histogram.from_dict(d)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar(h.edges[:-1], h.frequencies, width=np.diff(h.edges), align="edge", edgecolor="k")
        ax.set(xlabel="probability", ylabel="mean frequency", xlim=(0, 1), title=f"heat-map histogram: {group}")
        written.append(_save(fig, Path(out_dir) / f"histogram_{group}.png"))
    return written


def render_overlays(heatmap_dir, manifest_path, out_dir):
    """Overlay the lowest-fraction cells of every stored heat map on its image."""
    manifest = DatasetManifest.from_json(manifest_path)
    written = []
    for f in sorted(Path(heatmap_dir).glob("*.csv")):
        hm = read_heatmap(f)
        side = json.loads(f.with_suffix(".json").read_text())
        image = load_image(manifest[hm.image_id].path)
        if image.shape != tuple(hm.image_shape):
            image = resize_image(image, hm.image_shape)
        roi = load_mask(Path(heatmap_dir) / side["roi_file"]) if side.get("roi_file") else None
        cells = binarize_lowest_fraction(hm, roi=roi)
        out = Path(out_dir) / f"overlay_{hm.image_id}.png"
        out.parent.mkdir(parents=True, exist_ok=True)
        render_overlay(image, mask_to_pixels(hm, cells), out)
        written.append(out)
    return written


def render_report(result_dir, out_dir=None):
    """Render every figure whose inputs exist; raise MissingInputError when none do."""
    root = Path(result_dir)
    out = Path(out_dir) if out_dir else root / "figures"
    written = []
    found = False
    if list((root / "roc").glob("*.csv")):
        found = True
        written.append(plot_roc_overlay(root / "roc", out / "roc_overlay.png"))
    if (root / "ensemble" / "size_stats.json").exists():
        found = True
        written += plot_subset_boxplots(root / "ensemble" / "size_stats.json", out)
    if (root / "layer_study.json").exists():
        found = True
        written.append(plot_layer_study(root / "layer_study.json", out / "layer_study.png"))
    if (root / "size_sweep.json").exists():
        found = True
        written.append(plot_size_sweep(root / "size_sweep.json", out / "size_sweep.png"))
    if (root / "localization" / "histograms.json").exists():
        found = True
        written += plot_histograms(root / "localization" / "histograms.json", out)
    heatmaps = root / "localization" / "heatmaps"
    if list(heatmaps.glob("*.csv")):
        found = True
        if not (root / "manifest.json").exists():
            raise MissingInputError([str(root / "manifest.json")])
        written += render_overlays(heatmaps, root / "manifest.json", out / "overlays")
    if not found:
        raise MissingInputError([str(root / p) for p in EXPECTED])
    for p in written:
        log.info("wrote %s", p)
    return written
