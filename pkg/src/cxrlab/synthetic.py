"""Procedural chest-radiograph-like fixtures with known anatomy masks.

Each image is a body silhouette with two dark lung fields and a bright
cardiac shadow. Cardiomegaly widens the heart; pulmonary edema adds diffuse
opacity inside the lungs. Masks are written next to the images, so the
whole pipeline (including the rule-based baseline) runs without real data.
"""

import csv
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .datasets import save_mask


def _ellipse(shape, cy, cx, ry, rx):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def render_case(side, rng, heart_halfwidth, edema=False):
    """Return (image uint8, masks dict) for one synthetic frontal radiograph."""
    shape = (side, side)
    dy, dx = rng.uniform(-0.02, 0.02, size=2) * side
    body = _ellipse(shape, 0.55 * side + dy, 0.5 * side + dx, 0.50 * side, 0.42 * side)
    lung_r = _ellipse(shape, 0.45 * side + dy, 0.32 * side + dx, 0.28 * side, 0.13 * side)
    lung_l = _ellipse(shape, 0.45 * side + dy, 0.68 * side + dx, 0.28 * side, 0.13 * side)
    heart = _ellipse(shape, 0.63 * side + dy, 0.53 * side + dx, 0.12 * side, heart_halfwidth * side)

    img = np.full(shape, 20.0)
    img[body] = 150.0
    img[lung_r | lung_l] = 60.0
    if edema:
        haze = ndimage.gaussian_filter(rng.standard_normal(shape), side / 40)
        haze = 70.0 * (haze - haze.min()) / (np.ptp(haze) + 1e-12)
        img[lung_r | lung_l] += 40.0 + haze[lung_r | lung_l]
    img[heart] = 200.0
    img = ndimage.gaussian_filter(img, side / 100)
    img += ndimage.gaussian_filter(rng.standard_normal(shape), 1.0) * 12.0
    img = img * rng.uniform(0.9, 1.1)
    image = np.clip(img, 0, 255).astype(np.uint8)
    masks = {"lung_left": lung_l & ~heart, "lung_right": lung_r & ~heart, "heart": heart}
    return image, masks


def render_lateral(side, rng):
    shape = (side, side)
    img = np.full(shape, 20.0)
    img[_ellipse(shape, 0.55 * side, 0.5 * side, 0.45 * side, 0.30 * side)] = 140.0
    img[_ellipse(shape, 0.45 * side, 0.45 * side, 0.25 * side, 0.15 * side)] = 70.0
    img += rng.standard_normal(shape) * 8.0
    return np.clip(img, 0, 255).astype(np.uint8)


def make_synthetic_dataset(root, n_normal=40, n_cardiomegaly=40, n_edema=0, n_lateral=0, side=224, seed=0):
    """Write a synthetic dataset in the ``synthetic`` layout and return its root."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    cases = [("normal", [])] * n_normal + [("cardiomegaly", ["cardiomegaly"])] * n_cardiomegaly
    cases += [("edema", ["pulmonary_edema"])] * n_edema
    rows = []
    for i, (kind, labels) in enumerate(cases):
        image_id = f"syn{i:04d}"
        halfwidth = rng.uniform(0.15, 0.19) if kind == "cardiomegaly" else rng.uniform(0.09, 0.12)
        image, masks = render_case(side, rng, halfwidth, edema=kind == "edema")
        Image.fromarray(image).save(root / "images" / f"{image_id}.png")
        for name, mask in masks.items():
            save_mask(mask, root / "masks" / f"{image_id}_{name}.png")
        rows.append([image_id, f"images/{image_id}.png", "frontal", "|".join(labels)])
    for j in range(n_lateral):
        image_id = f"syn{len(cases) + j:04d}"
        Image.fromarray(render_lateral(side, rng)).save(root / "images" / f"{image_id}.png")
        rows.append([image_id, f"images/{image_id}.png", "lateral", "cardiomegaly" if j % 2 else ""])
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "filename", "view", "labels"])
        writer.writerows(rows)
    return root
