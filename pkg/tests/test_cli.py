import json
import time

import pytest
import yaml

from cxrlab import cli
from cxrlab.errors import ConfigurationError, NumericalError


def synthetic_config(root, out, **over):
    cfg = {
        "output_dir": str(out),
        "dataset": {"source": "synthetic", "root": str(root)},
        "experiment": {"n_train": 20, "n_test": 10, "seeds": [0]},
        "backbones": [
            {"family": "standin", "tap_layer": "pool2", "weights": "standin:0", "dropout": [0.0, 0.5]},
            {"family": "standin", "tap_layer": "gap", "weights": "standin:0"},
        ],
        "localization": {"enabled": True, "roi": "masks", "max_images": 1, "stride": 32},
    }
    for k, v in over.items():
        cfg[k] = {**cfg.get(k, {}), **v} if isinstance(v, dict) else v
    return cfg


def write_config(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def two_runs(synthetic_root, tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    outs, times = [], []
    for name in ("a", "b"):
        cfg = write_config(base / f"{name}.yaml", synthetic_config(synthetic_root, base / name))
        t0 = time.perf_counter()
        code = cli.main(["--quiet", "all", "--config", str(cfg)])
        times.append(time.perf_counter() - t0)
        assert code == 0
        outs.append(base / name)
    return outs, times


class TestEndToEnd:
    def test_completes_under_a_minute(self, two_runs):
        _, times = two_runs
        assert times[0] < 60

    def test_artifacts(self, two_runs):
        out = two_runs[0][0]
        for rel in ("manifest.json", "config.resolved.yaml", "models/index.json", "metrics/standin-gap-s0.json",
                    "predictions/standin-pool2-do0.5-s0.csv", "ensemble/subsets.csv", "ensemble/size_stats.json",
                    "roc/ensemble.csv", "localization/histograms.json", "figures/roc_overlay.png",
                    "figures/ensemble_auc_boxplot.png", "tables/summary.csv", "run_manifest.json"):
            assert (out / rel).exists(), rel
        # three models sharing one split give 7 non-empty subsets
        assert sum(1 for _ in open(out / "ensemble" / "subsets.csv")) == 8

    def test_metric_files_byte_identical(self, two_runs):
        (a, b), _ = two_runs
        files = sorted(p.relative_to(a) for p in a.rglob("*.json") if p.parts[-2] in ("metrics", "ensemble", "aggregate"))
        assert files
        for rel in files:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_run_manifest(self, two_runs):
        (a, b), _ = two_runs
        ma = json.loads((a / "run_manifest.json").read_text())
        mb = json.loads((b / "run_manifest.json").read_text())
        assert ma["stages"] == ["ingest", "extract", "train", "evaluate", "ensemble", "localize", "report"]
        assert ma["outputs"]["metrics/standin-gap-s0.json"] == mb["outputs"]["metrics/standin-gap-s0.json"]
        assert "manifest.json" in ma["inputs"] and "numpy" in ma["versions"]

    def test_stage_rerun(self, two_runs, tmp_path):
        out = two_runs[0][0]
        before = (out / "ensemble" / "metrics.json").read_bytes()
        cfg = yaml.safe_load((out / "config.resolved.yaml").read_text())
        code = cli.main(["--quiet", "ensemble", "--config", str(write_config(tmp_path / "c.yaml", cfg))])
        assert code == 0
        assert (out / "ensemble" / "metrics.json").read_bytes() == before

    def test_report_from_directory(self, two_runs, tmp_path):
        assert cli.main(["--quiet", "report", str(two_runs[0][0])]) == 0


class TestExitCodes:
    def test_invalid_root(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", synthetic_config(tmp_path / "nope", tmp_path / "out"))
        assert cli.main(["--quiet", "all", "--config", str(cfg)]) == 2
        assert "stage ingest failed" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", {"experiment": {"n_tran": 3}})
        assert cli.main(["train", "--config", str(cfg)]) == 1
        assert "experiment.n_tran" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["train", "--config", str(tmp_path / "none.yaml")]) == 1

    def test_missing_stage_inputs(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", synthetic_config(tmp_path, tmp_path / "out"))
        assert cli.main(["--quiet", "ensemble", "--config", str(cfg)]) == 2
        err = capsys.readouterr().err
        assert "stage ensemble failed" in err and "index.json" in err

    def test_report_empty(self, tmp_path):
        assert cli.main(["--quiet", "report", str(tmp_path)]) == 2

    def test_numerical_failure(self, tmp_path, monkeypatch, capsys):
        def boom(ctx):
            raise NumericalError("non-finite training loss at epoch 3")

        monkeypatch.setitem(cli.STAGE_FUNCS, "train", boom)
        cfg = write_config(tmp_path / "c.yaml", synthetic_config(tmp_path, tmp_path / "out"))
        assert cli.main(["--quiet", "train", "--config", str(cfg)]) == 3
        assert "epoch 3" in capsys.readouterr().err


class TestConfig:
    @pytest.mark.parametrize("preset", sorted(cli.PRESETS))
    def test_init_config_round_trip(self, tmp_path, preset):
        path = tmp_path / "c.yaml"
        assert cli.main(["init-config", str(path), "--preset", preset]) == 0
        raw = yaml.safe_load(path.read_text())
        assert cli.resolve_config(raw) == raw

    def test_defaults(self):
        cfg = cli.resolve_config({})
        assert cfg["head"] == {"learning_rate": 0.001, "epochs": 50, "batch_size": 32}
        assert cfg["experiment"]["n_train"] == 282 and cfg["experiment"]["n_test"] == 50
        assert cfg["localization"]["patch_side"] == 40 and cfg["localization"]["keep_fraction"] == 0.2
        assert cfg["operating_points"] == {"sensitivity": 0.98, "specificity": 0.98}

    def test_backbone_entries_filled(self):
        cfg = cli.resolve_config({"backbones": [{"family": "vgg16"}]})
        assert cfg["backbones"][0]["dropout"] == [0.0] and cfg["backbones"][0]["tap_layer"] is None

    def test_unknown_backbone_key(self):
        with pytest.raises(ConfigurationError):
            cli.resolve_config({"backbones": [{"family": "vgg16", "layer": "fc7"}]})

    def test_split_seed_must_be_trained(self):
        with pytest.raises(ConfigurationError):
            cli.resolve_config({"experiment": {"seeds": [3, 4]}})

    def test_relative_paths_follow_config(self, tmp_path):
        path = write_config(tmp_path / "c.yaml", {"dataset": {"root": "data"}, "output_dir": "out"})
        cfg = cli.load_config(path)
        assert cfg["dataset"]["root"] == str(tmp_path / "data")
        assert cfg["output_dir"] == str(tmp_path / "out")

    @pytest.mark.parametrize("seeds, expect", [(3, [0, 1, 2]), ([5, 7], [5, 7])])
    def test_seed_list(self, seeds, expect):
        assert cli.seed_list(seeds) == expect


def test_make_synthetic(tmp_path):
    assert cli.main(["make-synthetic", str(tmp_path / "d"), "--n-normal", "2", "--n-cardiomegaly", "2", "--side", "64"]) == 0
    assert len(list((tmp_path / "d").rglob("*.png"))) >= 4
