import json
import sys
import textwrap
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from cxrlab.backbones import (
    BackboneSpec,
    ExternalScorer,
    StandInBackbone,
    extract_features,
    layer_names,
    list_candidate_layers,
    load_backbone,
    preprocess_array,
    preprocess_image,
    read_feature_store,
    write_feature_store,
)
from cxrlab.datasets import ImageRecord, load_manifest
from cxrlab.errors import ConfigurationError, LayerNameError, ScorerError, ValidationError

DATA = Path(__file__).parent / "data"


class TestPreprocess:
    def test_large_gray_is_resized_and_replicated(self):
        img = np.random.default_rng(0).uniform(0, 255, size=(2048, 2048))
        out = preprocess_array(img, BackboneSpec("resnet152"))
        assert out.shape == (224, 224, 3)
        assert np.array_equal(out[..., 0] - out[..., 1], np.full((224, 224), out[0, 0, 0] - out[0, 0, 1]))

    def test_scale_unit_range(self):
        img = np.random.default_rng(1).uniform(0, 255, size=(224, 224, 3))
        out = preprocess_array(img, BackboneSpec("vgg16", preprocessing="scale_unit"))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_constant_mean_subtract(self):
        out = preprocess_array(np.full((50, 70), 100.0), BackboneSpec("alexnet"))
        assert out.shape == (227, 227, 3)
        np.testing.assert_allclose(out[..., 0], 100.0 - 123.68, atol=1e-4)
        np.testing.assert_allclose(out[..., 1], 100.0 - 116.779, atol=1e-4)
        np.testing.assert_allclose(out[..., 2], 100.0 - 103.939, atol=1e-4)

    def test_zero_sized(self):
        with pytest.raises(ValidationError):
            preprocess_array(np.zeros((0, 5)), BackboneSpec("standin"))

    def test_unreadable_file(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not a png")
        with pytest.raises(OSError):
            preprocess_image(ImageRecord("b", str(tmp_path / "bad.png"), "synthetic"), BackboneSpec("standin"))

    def test_deterministic(self):
        img = np.random.default_rng(2).uniform(0, 255, size=(300, 260))
        spec = BackboneSpec("standin")
        assert np.array_equal(preprocess_array(img, spec), preprocess_array(img, spec))


class TestLayers:
    def test_resnet152_table(self):
        rows = list_candidate_layers("resnet152")
        assert [r[0] for r in rows] == [
            "res4b35_branch2c", "res4b35_branch2cx", "res4b35", "res4b35x",
            "res5c_branch2c", "res5c_branch2cx", "res5c", "res5cx", "pool5",
        ]
        assert rows[-1] == ("pool5", "Final", "Average Pooling")
        assert all(name in layer_names("resnet152") for name, _, _ in rows)

    def test_vgg19_has_second_fc(self):
        assert "fc7" in [r[0] for r in list_candidate_layers("vgg19")]

    def test_pure(self):
        assert list_candidate_layers("alexnet") == list_candidate_layers("alexnet")

    def test_unknown_family(self):
        with pytest.raises(ValidationError):
            list_candidate_layers("inception")

    @pytest.mark.parametrize("family,tap", [("resnet50", "res4f"), ("resnet101", "res4b22"), ("resnet152", "res4b35"), ("vgg16", "fc7"), ("alexnet", "fc7")])
    def test_default_taps(self, family, tap):
        assert BackboneSpec(family).tap_layer == tap
        assert tap in layer_names(family)

    def test_bad_tap_lists_valid_names(self):
        with pytest.raises(LayerNameError) as err:
            BackboneSpec("standin", "fc9")
        assert "pool2" in err.value.valid


class TestStandIn:
    def test_golden_vector(self):
        golden = json.loads((DATA / "standin_gap_golden.json").read_text())
        spec = BackboneSpec.from_dict(golden["backbone"])
        rec = ImageRecord("fixture", str(DATA / "fixture_cxr.png"), "synthetic")
        (vec,) = extract_features([rec], spec, golden["weights"])
        np.testing.assert_allclose(vec.values, golden["values"], rtol=1e-10, atol=1e-12)

    def test_same_image_twice(self, synthetic_root):
        m = load_manifest(synthetic_root, "synthetic")
        r = m.records[0]
        a, b = extract_features([r, r], BackboneSpec("standin"), "standin:0")
        assert np.array_equal(a.values, b.values)

    def test_common_dim_and_frozen(self, synthetic_root):
        m = load_manifest(synthetic_root, "synthetic")
        bb = load_backbone("standin", "standin:0")
        before = bb.checksum()
        vecs = extract_features(m.records[:10], BackboneSpec("standin", "pool2"), "standin:0")
        assert len(vecs) == 10 and len({v.dim for v in vecs}) == 1
        assert bb.checksum() == before
        with pytest.raises(ValueError):
            bb.weights["conv1_w"][0, 0, 0, 0] = 1.0

    def test_weights_file_round_trip(self, tmp_path):
        bb = StandInBackbone.from_seed(5)
        bb.save(tmp_path / "w.npz")
        assert load_backbone("standin", str(tmp_path / "w.npz")).checksum() == bb.checksum()

    def test_missing_weights(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_backbone("standin", str(tmp_path / "nope.npz"))
        with pytest.raises(ConfigurationError):
            load_backbone("resnet50", str(tmp_path / "nope.pth"))

    def test_cache_hits(self, synthetic_root, tmp_path):
        m = load_manifest(synthetic_root, "synthetic")
        spec = BackboneSpec("standin", "gap")
        first = extract_features(m.records[:3], spec, "standin:0", cache_dir=tmp_path)
        assert len(list(tmp_path.glob("*.npy"))) == 3
        second = extract_features(m.records[:3], spec, "standin:0", cache_dir=tmp_path)
        for a, b in zip(first, second):
            assert np.array_equal(a.values, b.values)

    def test_order_independent(self, synthetic_root):
        m = load_manifest(synthetic_root, "synthetic")
        recs = m.records[:6]
        spec = BackboneSpec("standin", "gap")
        fwd = {v.image_id: v.values for v in extract_features(recs, spec, "standin:0", batch_size=4)}
        rev = {v.image_id: v.values for v in extract_features(recs[::-1], spec, "standin:0", batch_size=1)}
        for k in fwd:
            np.testing.assert_allclose(fwd[k], rev[k], rtol=1e-12)


def test_feature_store_round_trip(tmp_path, synthetic_root):
    m = load_manifest(synthetic_root, "synthetic")
    vecs = extract_features(m.records[:4], BackboneSpec("standin", "gap"), "standin:0")
    write_feature_store(tmp_path / "f.csv", vecs)
    back = read_feature_store(tmp_path / "f.csv")
    assert [v.image_id for v in back] == [v.image_id for v in vecs]
    for a, b in zip(vecs, back):
        assert a.backbone == b.backbone
        assert np.array_equal(a.values, b.values)


class TestTorchAdapter:
    torch = pytest.importorskip("torch")

    def test_resnet50_taps(self):
        bb = load_backbone("resnet50", "random:0")
        x = preprocess_array(np.random.default_rng(0).uniform(0, 255, (64, 64)), BackboneSpec("resnet50"))[None]
        total = bb.forward(x, "res4f")
        relu = bb.forward(x, "res4fx")
        assert total.shape == (1, 1024 * 14 * 14)
        np.testing.assert_allclose(np.maximum(total, 0), relu, atol=1e-5)
        assert total.min() < 0
        assert bb.forward(x, "res4f_branch2c").shape == total.shape
        assert bb.forward(x, "pool5").shape == (1, 2048)
        before = bb.checksum()
        bb.forward(x, "res4f_branch2cx")
        assert bb.checksum() == before

    def test_alexnet_fc7(self):
        bb = load_backbone("alexnet", "random:1")
        spec = BackboneSpec("alexnet")
        x = preprocess_array(np.full((100, 100), 90.0), spec)[None]
        assert bb.forward(x, spec.tap_layer, spec.preprocessing).shape == (1, 4096)


SCORER_SCRIPT = textwrap.dedent(
    """
    import sys
    import numpy as np
    from PIL import Image
    for line in sys.stdin:
        path = line.strip()
        if path.endswith("fail.png"):
            print("oops", flush=True)
            continue
        print(float(np.asarray(Image.open(path).convert("L"), float).mean() / 255.0), flush=True)
    """
)


def test_external_scorer_protocol(tmp_path):
    script = tmp_path / "scorer.py"
    script.write_text(SCORER_SCRIPT)
    Image.fromarray(np.full((8, 8), 51, np.uint8)).save(tmp_path / "img.png")
    with ExternalScorer([sys.executable, str(script)]) as scorer:
        assert scorer.score_path(tmp_path / "img.png") == pytest.approx(0.2)
        assert scorer(np.full((5, 5), 255.0)) == pytest.approx(1.0)
        Image.fromarray(np.zeros((2, 2), np.uint8)).save(tmp_path / "fail.png")
        with pytest.raises(ScorerError):
            scorer.score_path(tmp_path / "fail.png")
