import csv
import json

import pytest
import yaml

from wsroi.cli import main
from wsroi.config import load_config, stage_seed
from wsroi.data import load_dataset, load_mask

SIZE = "32"
SMALL_CLS = ["--widths", "2,2,4,4,4", "--convs", "1,1,1,1,1", "--epochs", "2"]
SMALL_EXT = ["--width", "2", "--epochs", "2"]


def common(data, out):
    return ["--seed", "3", "--size", SIZE, "--data", str(data), "--out", str(out)]


@pytest.fixture(scope="module")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--seed", "3", "--n", "12", "--size", SIZE, "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def run_dir(synth_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train-classifier", *common(synth_root, out), *SMALL_CLS]) == 0
    assert main(["gen-pseudo", *common(synth_root, out), "--heatmaps"]) == 0
    assert main(["train-extractor", *common(synth_root, out), *SMALL_EXT]) == 0
    assert main(["evaluate", *common(synth_root, out)]) == 0
    return out


class TestSynth:
    def test_layout(self, synth_root):
        train = load_dataset(synth_root, "train", size=(32, 32))
        test = load_dataset(synth_root, "test", size=(32, 32))
        assert len(train) + len(test) == 12
        assert len(list((synth_root / "train" / "masks").glob("*.png"))) == len(train)
        assert (synth_root / "config_synth.yaml").exists()

    def test_refuses_non_empty_without_force(self, synth_root):
        assert main(["synth", "--seed", "3", "--n", "12", "--size", SIZE, "--out", str(synth_root)]) == 1

    def test_force_rewrites_identically(self, tmp_path):
        args = ["synth", "--seed", "5", "--n", "6", "--size", SIZE, "--out", str(tmp_path)]
        assert main(args) == 0
        before = {p.relative_to(tmp_path): p.read_bytes() for p in tmp_path.rglob("*.png")}
        assert main(args + ["--force"]) == 0
        after = {p.relative_to(tmp_path): p.read_bytes() for p in tmp_path.rglob("*.png")}
        assert before == after

    def test_zero_samples_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--n", "0", "--out", str(tmp_path)])
        assert exc.value.code == 2


class TestStages:
    def test_artifacts(self, run_dir, synth_root):
        assert (run_dir / "checkpoints" / "classifier.pt").exists()
        assert (run_dir / "checkpoints" / "extractor_up1-up2.pt").exists()
        train = load_dataset(synth_root, "train", size=(32, 32))
        for s in train:
            m = load_mask(run_dir / "pseudo" / f"{s.id}.png")
            assert m.shape == (32, 32)
        assert list((run_dir / "plots" / "heatmaps").glob("*_merged.png"))
        report = json.loads((run_dir / "reports" / "report_up1-up2_test.json").read_text())
        for key in ("ac", "auc", "precision", "recall", "f_measure"):
            assert 0.0 <= report[key] <= 1.0

    def test_logs(self, run_dir):
        with open(run_dir / "reports" / "extractor_up1-up2_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["epoch", "lr", "ce", "lq1", "lq2", "total"]
        assert len(rows) == 2
        with open(run_dir / "reports" / "classifier_loss.csv") as fh:
            assert next(csv.reader(fh)) == ["epoch", "loss"]

    def test_config_snapshot_replays(self, run_dir, tmp_path):
        path = run_dir / "config_train-extractor_up1-up2.yaml"
        snap = yaml.safe_load(path.read_text())
        assert snap["seed"] == 3
        assert snap["extractor_train"]["epochs"] == 2
        assert snap["extractor_train"]["contrastive_taps"] == ["up1", "up2"]
        load_config(path).save(tmp_path / "replay.yaml")
        assert (tmp_path / "replay.yaml").read_text() == path.read_text()

    def test_plot(self, run_dir):
        assert main(["plot", "--out", str(run_dir)]) == 0
        assert (run_dir / "plots" / "roc_curves.png").exists()
        assert (run_dir / "plots" / "pr_curves.png").exists()

    def test_missing_upstream(self, synth_root, tmp_path, caplog):
        assert main(["gen-pseudo", *common(synth_root, tmp_path)]) == 1
        assert "train-classifier" in caplog.text
        assert main(["train-extractor", *common(synth_root, tmp_path)]) == 1
        assert "gen-pseudo" in caplog.text
        assert main(["evaluate", *common(synth_root, tmp_path)]) == 1
        assert "train-extractor" in caplog.text

    def test_bad_taps_flag(self, synth_root, tmp_path):
        with pytest.raises(SystemExit):
            main(["train-extractor", *common(synth_root, tmp_path), "--taps", "up4"])

    def test_set_override(self, synth_root, run_dir):
        assert main(["train-extractor", *common(synth_root, run_dir), *SMALL_EXT, "--taps", "up2",
                     "--set", "extractor_train.tau=0.2"]) == 0
        snap = yaml.safe_load((run_dir / "config_train-extractor_up2.yaml").read_text())
        assert snap["extractor_train"]["tau"] == 0.2


class TestConfig:
    def test_file_then_flags(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"seed": 9, "extractor_train": {"epochs": 7, "tau": 0.1}}))
        cfg = load_config(path, {"extractor_train.epochs": 3})
        assert cfg.seed == 9 and cfg.extractor_train.epochs == 3 and cfg.extractor_train.tau == 0.1

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"extractor_train": {"nope": 1}}))
        with pytest.raises(ValueError, match="nope"):
            load_config(path)

    def test_seed_fan_out(self):
        cfg = load_config(overrides={"seed": 4})
        seeds = {cfg.classifier.seed, cfg.classifier_train.seed, cfg.extractor.seed, cfg.extractor_train.seed}
        assert len(seeds) == 4
        assert cfg.extractor_train.seed == stage_seed(4, "extractor-train")
        assert load_config(overrides={"seed": 4}).to_dict() == cfg.to_dict()

    def test_sizes_follow_data(self):
        cfg = load_config(overrides={"data.size": 64})
        assert cfg.classifier.input_size == cfg.extractor.input_size == 64
