import math

import numpy as np
import pytest
import torch

from wsroi.data import synthesize_dataset
from wsroi.extractor import (
    ExtractorConfig,
    ExtractorTrainConfig,
    build_unet,
    cross_entropy,
    forward_with_feature_taps,
    joint_loss,
    load_extractor,
    mask_from_probs,
    predict_mask,
    save_extractor,
    train_extractor,
)

SMALL = ExtractorConfig(input_size=32, base_width=2, seed=0)


def tiny_data(n=4, size=32, seed=0):
    ds = synthesize_dataset(seed, n, (size, size))
    return ds, {s.id: s.gt_mask for s in ds}


class TestBuild:
    def test_tap_sizes_at_256(self):
        model = build_unet(ExtractorConfig(input_size=256, base_width=2))
        probs, up1, up2 = forward_with_feature_taps(model, np.zeros((256, 256, 3), np.float32))
        assert tuple(up1.shape[2:]) == (32, 32)
        assert tuple(up2.shape[2:]) == (64, 64)
        assert probs.shape == (1, 2, 256, 256)

    def test_tap_channels(self):
        model = build_unet(ExtractorConfig(input_size=32, base_width=3))
        _, up1, up2 = forward_with_feature_taps(model, np.zeros((32, 32, 3), np.float32))
        assert up1.shape[1] == model.tap_channels["up1"] == 24
        assert up2.shape[1] == model.tap_channels["up2"] == 12

    def test_same_seed(self):
        a, b = build_unet(SMALL), build_unet(SMALL)
        for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(pa, pb)

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            build_unet(ExtractorConfig(input_size=100))

    @pytest.mark.parametrize("norm", ["batch", "group", "none"])
    def test_norm_choices(self, norm):
        model = build_unet(ExtractorConfig(input_size=32, base_width=3, norm=norm)).eval()
        x = np.random.default_rng(0).random((2, 32, 32, 3)).astype(np.float32)
        probs, _, _ = forward_with_feature_taps(model, x)
        single, _, _ = forward_with_feature_taps(model, x[:1])
        # eval-mode output of an image never depends on the rest of the batch
        torch.testing.assert_close(probs[:1], single)
        has_bn = any(isinstance(m, torch.nn.BatchNorm2d) for m in model.modules())
        assert has_bn == (norm == "batch")

    def test_unknown_norm(self):
        with pytest.raises(ValueError, match="norm"):
            build_unet(ExtractorConfig(input_size=32, norm="layer"))


class TestForward:
    def test_probabilities_sum_to_one(self):
        model = build_unet(SMALL).eval()
        x = np.random.default_rng(0).random((2, 32, 32, 3)).astype(np.float32)
        probs, _, _ = forward_with_feature_taps(model, x)
        np.testing.assert_allclose(probs.sum(1).detach().numpy(), 1.0, atol=1e-6)

    def test_zero_input_finite(self):
        model = build_unet(SMALL).eval()
        probs, up1, up2 = forward_with_feature_taps(model, np.zeros((32, 32, 3), np.float32))
        assert all(torch.isfinite(t).all() for t in (probs, up1, up2))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward_with_feature_taps(build_unet(SMALL), np.zeros((64, 64, 3), np.float32))


class TestPredictMask:
    def test_confident_foreground(self):
        p = torch.tensor([0.3, 0.7]).view(1, 2, 1, 1).expand(1, 2, 4, 4)
        assert torch.all(mask_from_probs(p) == 1)

    def test_tie_goes_to_foreground(self):
        assert torch.all(mask_from_probs(torch.full((1, 2, 3, 3), 0.5)) == 1)

    def test_binary_output(self):
        m = predict_mask(build_unet(SMALL), np.random.default_rng(0).random((32, 32, 3)).astype(np.float32))
        assert m.shape == (32, 32) and set(np.unique(m)) <= {0, 1}


class TestCrossEntropy:
    def test_perfect_prediction(self):
        y = torch.randint(0, 2, (1, 4, 4))
        p = torch.nn.functional.one_hot(y, 2).permute(0, 3, 1, 2).double()
        loss = cross_entropy(p, y)
        assert abs(loss.item() - (-math.log(1 - 1e-7))) < 1e-12

    def test_uniform(self):
        loss = cross_entropy(torch.full((2, 2, 3, 3), 0.5), torch.randint(0, 2, (2, 3, 3)))
        assert abs(loss.item() - math.log(2)) < 1e-6

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            fg = rng.random((1, 8, 8))
            p = np.concatenate([1 - fg, fg])[None]
            y = rng.integers(0, 2, (1, 8, 8))
            expected = 0.0
            for i in range(8):
                for j in range(8):
                    prob = min(max(p[0, y[0, i, j], i, j], 1e-7), 1 - 1e-7)
                    expected -= math.log(prob)
            expected /= 64
            got = cross_entropy(torch.from_numpy(p), torch.from_numpy(y)).item()
            assert abs(got - expected) <= 1e-6

    def test_non_negative(self):
        p = torch.softmax(torch.randn(3, 2, 5, 5), 1)
        assert cross_entropy(p, torch.randint(0, 2, (3, 5, 5))).item() >= 0

    def test_confident_wrong_is_finite(self):
        p = torch.zeros(1, 2, 2, 2)
        p[:, 0] = 1.0
        assert math.isfinite(cross_entropy(p, torch.ones(1, 2, 2, dtype=torch.long)).item())

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cross_entropy(torch.rand(1, 2, 4, 4), torch.zeros(1, 4, 5))


class TestJointLoss:
    def test_sum(self):
        assert joint_loss(0.5, 0.2, 0.3) == pytest.approx(1.0)
        assert joint_loss(0.0, 0.0, 0.0) == 0.0

    def test_contrast_disabled(self):
        ce = torch.tensor(0.731)
        assert joint_loss(ce).item() == ce.item()

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            joint_loss(float("nan"), 0.0, 0.0)


class TestSchedule:
    def test_closed_form(self):
        cfg = ExtractorTrainConfig()
        for e in range(100):
            assert cfg.lr_at(e) == 5e-5 * 0.5 ** (e // 20)
        assert cfg.lr_at(20) == 2.5e-5 and cfg.lr_at(40) == 1.25e-5

    def test_recipe_defaults(self):
        cfg = ExtractorTrainConfig()
        assert (cfg.lr0, cfg.batch_size, cfg.epochs, cfg.contrastive_taps) == (5e-5, 2, 100, ("up1", "up2"))

    def test_bad_taps(self):
        with pytest.raises(ValueError):
            ExtractorTrainConfig(contrastive_taps=("up4",))
        with pytest.raises(ValueError):
            ExtractorTrainConfig(contrastive_taps=("up1", "up2", "up3"))


class TestTraining:
    def test_missing_label_names_sample(self):
        ds, labels = tiny_data()
        labels.pop(ds[1].id)
        with pytest.raises(KeyError, match=ds[1].id):
            train_extractor(build_unet(SMALL), ds, labels, ExtractorTrainConfig(epochs=1))

    def test_history_and_lr_log(self):
        ds, labels = tiny_data()
        _, hist = train_extractor(build_unet(SMALL), ds, labels,
                                  ExtractorTrainConfig(epochs=3, lr_step=1, seed=1))
        assert hist.column("lr") == [5e-5, 2.5e-5, 1.25e-5]
        for row in hist.rows:
            assert row["total"] == pytest.approx(row["ce"] + row["lq1"] + row["lq2"], abs=1e-6)
            assert all(math.isfinite(v) for v in row.values())

    def test_no_contrast_total_equals_ce(self):
        ds, labels = tiny_data()
        _, hist = train_extractor(build_unet(SMALL), ds, labels,
                                  ExtractorTrainConfig(epochs=2, contrastive_enabled=False))
        assert hist.column("total") == hist.column("ce")
        assert hist.column("lq1") == [0.0, 0.0]

    @pytest.mark.parametrize("taps", [("up1",), ("up2",), ("up3",), ("up2", "up3"), ("up1", "up3"), ("up1", "up2")])
    def test_tap_subsets_run(self, taps):
        ds, labels = tiny_data()
        _, hist = train_extractor(build_unet(SMALL), ds, labels, ExtractorTrainConfig(epochs=1, contrastive_taps=taps))
        assert len(hist.rows) == 1
        if len(taps) == 1:
            assert hist.rows[0]["lq2"] == 0.0

    def test_projection_head(self):
        ds, labels = tiny_data()
        model = build_unet(ExtractorConfig(input_size=32, base_width=2, projection_dim=5))
        _, hist = train_extractor(model, ds, labels, ExtractorTrainConfig(epochs=1))
        assert math.isfinite(hist.rows[0]["lq1"])

    def test_deterministic(self):
        ds, labels = tiny_data()
        runs = [train_extractor(build_unet(SMALL), ds, labels, ExtractorTrainConfig(epochs=2, seed=4))[1].rows
                for _ in range(2)]
        assert runs[0] == runs[1]

    def test_probabilities_stay_normalised_after_training(self):
        ds, labels = tiny_data()
        model, _ = train_extractor(build_unet(SMALL), ds, labels, ExtractorTrainConfig(epochs=1))
        model.eval()
        probs, _, _ = forward_with_feature_taps(model, ds.images())
        np.testing.assert_allclose(probs.sum(1).detach().numpy(), 1.0, atol=1e-6)

    def test_checkpoint_roundtrip(self, tmp_path):
        model = build_unet(SMALL).eval()
        save_extractor(model, tmp_path / "e.pt", ExtractorTrainConfig(epochs=7))
        back, ckpt = load_extractor(tmp_path / "e.pt")
        assert ckpt["train_config"]["epochs"] == 7
        x = torch.rand(1, 3, 32, 32)
        assert torch.equal(model(x), back(x))
