import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cxrlab.datasets import (
    DatasetManifest,
    ImageRecord,
    SplitSpec,
    load_image,
    load_manifest,
    make_balanced_split,
    make_size_sweep,
    normalize_tag,
)
from cxrlab.errors import CapacityError, IngestionError, ValidationError

from conftest import write_indiana


def test_shenzhen_counts(tmp_path):
    img_dir = tmp_path / "CXR_png"
    img_dir.mkdir()
    for i in range(326):
        (img_dir / f"CHNCXR_{i + 1:04d}_0.png").touch()
    for i in range(336):
        (img_dir / f"CHNCXR_{i + 327:04d}_1.png").touch()
    m = load_manifest(tmp_path, "shenzhen")
    assert len(m) == 662
    assert sum("tuberculosis" in r.labels for r in m) == 336
    assert sum(r.is_normal for r in m) == 326


def test_shenzhen_missing_clinical_reading(tmp_path):
    (tmp_path / "CHNCXR_0001_0.png").touch()
    (tmp_path / "ClinicalReadings").mkdir()
    with pytest.raises(IngestionError, match="CHNCXR_0001_0.txt"):
        load_manifest(tmp_path, "shenzhen")


@pytest.mark.parametrize("source", ["indiana", "jsrt", "shenzhen", "synthetic"])
def test_empty_directory(tmp_path, source):
    assert len(load_manifest(tmp_path, source)) == 0


def test_missing_root_is_ingestion_error(tmp_path):
    with pytest.raises(IngestionError):
        load_manifest(tmp_path / "nope", "indiana")


def test_synthetic_hand_written_annotations(tmp_path):
    (tmp_path / "img").mkdir()
    tags = {"a": "", "b": "Cardiomegaly", "c": "cardiomegaly|Pulmonary Edema", "d": "nodule"}
    with open(tmp_path / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "filename", "view", "labels"])
        for k, v in tags.items():
            (tmp_path / "img" / f"{k}.png").touch()
            w.writerow([k, f"img/{k}.png", "lateral" if k == "d" else "frontal", v])
    m = load_manifest(tmp_path, "synthetic")
    assert [r.id for r in m] == ["a", "b", "c", "d"]
    assert m["a"].labels == frozenset()
    assert m["b"].labels == {"cardiomegaly"}
    assert m["c"].labels == {"cardiomegaly", "pulmonary_edema"}
    assert m["d"].view == "lateral"


def test_synthetic_bad_line_reports_line_number(tmp_path):
    (tmp_path / "labels.csv").write_text("id,filename,view,labels\na,a.png,frontal\n")
    with pytest.raises(IngestionError, match=r"labels.csv:2"):
        load_manifest(tmp_path, "synthetic")


def test_synthetic_missing_annotation(tmp_path):
    (tmp_path / "x.png").touch()
    with pytest.raises(IngestionError, match="labels.csv"):
        load_manifest(tmp_path, "synthetic")


class TestIndiana:
    def test_parse(self, indiana_root):
        m = load_manifest(indiana_root, "indiana")
        assert len(m) == 332 + 400 + 20
        assert sum(r.view == "lateral" for r in m) == 20
        assert sum("cardiomegaly" in r.labels and r.view == "frontal" for r in m) == 332

    def test_mesh_terms(self, tmp_path):
        write_indiana(
            tmp_path,
            n_cardio=1,
            n_normal=1,
            n_lateral=0,
            extra_rows=[["99", "Pulmonary Disease, Chronic Obstructive/mild;Cardiomegaly", "", ""]],
        )
        with open(tmp_path / "indiana_projections.csv", "a", newline="") as fh:
            csv.writer(fh).writerow(["99", "x99.png", "Frontal"])
        (tmp_path / "images" / "x99.png").touch()
        m = load_manifest(tmp_path, "indiana")
        assert m["x99"].labels == {"pulmonary_disease_chronic_obstructive", "cardiomegaly"}

    def test_missing_reports_file(self, tmp_path):
        write_indiana(tmp_path, n_cardio=1, n_normal=1)
        (tmp_path / "indiana_reports.csv").unlink()
        with pytest.raises(IngestionError, match="indiana_reports.csv"):
            load_manifest(tmp_path, "indiana")

    def test_bad_line(self, tmp_path):
        write_indiana(tmp_path, n_cardio=1, n_normal=1)
        with open(tmp_path / "indiana_reports.csv", "a") as fh:
            fh.write("7,normal\n")
        with pytest.raises(IngestionError, match=r"indiana_reports.csv:4"):
            load_manifest(tmp_path, "indiana")


def test_jsrt_layout(tmp_path):
    for name in ("JPCLN001.IMG", "JPCLN002.png", "JPCNN001.IMG"):
        (tmp_path / name).touch()
    (tmp_path / "CLNDAT_EN.txt").write_text("JPCLN001.IMG\t3\tmalignant\nJPCLN002.IMG\t2\tbenign\n")
    (tmp_path / "CNNDAT_EN.TXT").write_text("JPCNN001.IMG\t\t\n")
    masks = tmp_path / "scr" / "masks" / "heart"
    masks.mkdir(parents=True)
    (masks / "JPCLN001.gif").touch()
    m = load_manifest(tmp_path, "jsrt")
    assert [r.id for r in m] == ["JPCLN001", "JPCLN002", "JPCNN001"]
    assert m["JPCLN002"].path.endswith(".png")
    assert m["JPCLN001"].labels == {"nodule"} and m["JPCNN001"].is_normal
    assert set(m["JPCLN001"].masks) == {"heart"}


def test_jsrt_bad_annotation_line(tmp_path):
    (tmp_path / "JPCLN001.IMG").touch()
    (tmp_path / "CLNDAT_EN.txt").write_text("JPCLN001.IMG\t3\ngarbage here\n")
    with pytest.raises(IngestionError, match=r"CLNDAT_EN.txt:2"):
        load_manifest(tmp_path, "jsrt")


def test_jsrt_raw_reader(tmp_path):
    raw = np.zeros((2048, 2048), dtype=">u2")
    raw[0, 0] = 4095
    raw.tofile(tmp_path / "JPCNN001.IMG")
    img = load_image(tmp_path / "JPCNN001.IMG")
    assert img.shape == (2048, 2048)
    assert img[0, 0] == 0.0 and img[1, 1] == 255.0


def test_load_image_rgb_and_gray(tmp_path):
    Image.fromarray(np.full((4, 5, 3), 100, np.uint8)).save(tmp_path / "c.png")
    Image.fromarray(np.full((4, 5), 7, np.uint8)).save(tmp_path / "g.png")
    assert load_image(tmp_path / "c.png").shape == (4, 5)
    assert np.all(load_image(tmp_path / "g.png") == 7.0)


def test_normalize_tag():
    assert normalize_tag("Hernia, Hiatal") == "hernia_hiatal"
    assert normalize_tag("  Pulmonary   Atelectasis ") == "pulmonary_atelectasis"


def test_manifest_invariants(tmp_path, synthetic_root):
    m = load_manifest(synthetic_root, "synthetic")
    m.to_json(tmp_path / "manifest.json")
    assert DatasetManifest.from_json(tmp_path / "manifest.json") == m
    r = ImageRecord("x", "p", "synthetic")
    with pytest.raises(ValidationError):
        DatasetManifest([r, r])
    with pytest.raises(ValidationError):
        ImageRecord("y", "p", "mimic")
    with pytest.raises(ValidationError):
        ImageRecord("y", "p", "synthetic", labels={"normal"})


class TestSplits:
    def test_published_sizes(self, indiana_root):
        m = load_manifest(indiana_root, "indiana")
        s = make_balanced_split(m, "cardiomegaly", 282, 50, seed=0)
        assert len(s.train_ids) == 564 and len(s.test_ids) == 100
        assert all(m[i].view == "frontal" for i in s.train_ids + s.test_ids)

    def test_degenerate_sizes(self):
        m = DatasetManifest([ImageRecord("p", "p", "synthetic", labels={"x"}), ImageRecord("n", "n", "synthetic")])
        s = make_balanced_split(m, "x", 0, 1, seed=1)
        assert s.train_pos == () and s.train_neg == ()
        assert s.test_pos == ("p",) and s.test_neg == ("n",)

    def test_deterministic(self, indiana_root, tmp_path):
        m = load_manifest(indiana_root, "indiana")
        a = make_balanced_split(m, "cardiomegaly", 30, 10, seed=7)
        b = make_balanced_split(m, "cardiomegaly", 30, 10, seed=7)
        a.to_json(tmp_path / "a.json")
        b.to_json(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert SplitSpec.from_json(tmp_path / "a.json") == a
        assert make_balanced_split(m, "cardiomegaly", 30, 10, seed=8) != a

    def test_capacity_error_reports_counts(self, indiana_root):
        m = load_manifest(indiana_root, "indiana")
        with pytest.raises(CapacityError, match="positives=332"):
            make_balanced_split(m, "cardiomegaly", 300, 50, seed=0)

    def test_lateral_flag(self, synthetic_root):
        m = load_manifest(synthetic_root, "synthetic")
        from cxrlab.datasets import candidate_pools

        front, _ = candidate_pools(m, "cardiomegaly")
        both, _ = candidate_pools(m, "cardiomegaly", include_lateral=True)
        assert len(both) > len(front)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 150), st.integers(1, 50), st.integers(0, 2**31))
    def test_split_properties(self, indiana_root, n_train, n_test, seed):
        m = load_manifest(indiana_root, "indiana")
        s = make_balanced_split(m, "cardiomegaly", n_train, n_test, seed)
        assert not set(s.train_ids) & set(s.test_ids)
        assert len(s.train_pos) == len(s.train_neg) == n_train
        assert len(s.test_pos) == len(s.test_neg) == n_test
        assert all(m[i].is_normal for i in s.train_neg + s.test_neg)
        assert all("cardiomegaly" in m[i].labels for i in s.train_pos + s.test_pos)


class TestSizeSweep:
    def test_grid(self, indiana_root):
        m = load_manifest(indiana_root, "indiana")
        sweep = make_size_sweep(m, "cardiomegaly", [25, 50, 100, 200, 282], 50, seeds=[1, 2, 3])
        assert len(sweep) == 15
        by_seed = {}
        for s in sweep:
            by_seed.setdefault(s.seed, {})[len(s.train_pos)] = s
        assert by_seed[3][25].test_ids == by_seed[3][200].test_ids
        assert set(by_seed[3][25].train_pos) <= set(by_seed[3][200].train_pos)

    def test_empty_sizes(self, indiana_root):
        m = load_manifest(indiana_root, "indiana")
        assert make_size_sweep(m, "cardiomegaly", [], 50, seeds=[0, 1]) == []

    def test_capacity(self, indiana_root):
        m = load_manifest(indiana_root, "indiana")
        with pytest.raises(CapacityError):
            make_size_sweep(m, "cardiomegaly", [400], 50, seeds=[0])
