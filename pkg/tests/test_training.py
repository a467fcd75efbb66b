import json

import numpy as np
import pytest
import torch
from torch import nn

from usd_fss.config import TrainConfig
from usd_fss.encoders import EncoderConfig, FrozenBundle
from usd_fss.episodes import sample_episode
from usd_fss.model import FeatureStore, count_learnables, episode_rng
from usd_fss.training import (
    CheckpointError,
    TrainingError,
    load_checkpoint,
    save_checkpoint,
    state_equal,
    total_steps,
    train,
)


def tiny_config(raw_config, **kw):
    base = {"steps": 4, "batch_size": 2, "lgm.blocks": 2, "lgm.avg_last": 2}
    base.update(kw)
    return TrainConfig(encoder=raw_config).with_overrides(base)


@pytest.fixture(scope="module")
def short_run(raw_config, raw_bundle, small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    before = raw_bundle.fingerprint
    result = train(tiny_config(raw_config, steps=10), small_dataset, out_dir=out, bundle=raw_bundle)
    return result, out, before


@pytest.fixture(scope="module")
def probe(small_dataset):
    return sample_episode(small_dataset, {0, 1}, 1, np.random.default_rng(5))


class TestTrain:
    def test_frozen_fingerprint_unchanged(self, short_run, raw_bundle):
        _, _, before = short_run
        assert raw_bundle.fingerprint == before

    def test_loss_log_written(self, short_run):
        result, out, _ = short_run
        lines = (out / "loss.jsonl").read_text().splitlines()
        assert len(lines) == 10
        rec = json.loads(lines[0])
        assert set(rec) == {"step", "loss", "loss_ref", "loss_pred"}
        assert [r["loss"] for r in result.losses] == [json.loads(l)["loss"] for l in lines]

    def test_same_seed_same_run(self, raw_config, raw_bundle, small_dataset):
        a = train(tiny_config(raw_config), small_dataset, bundle=raw_bundle)
        b = train(tiny_config(raw_config), small_dataset, bundle=raw_bundle)
        assert a.losses == b.losses
        assert state_equal(a.pipeline.net, b.pipeline.net)

    def test_different_seed_differs(self, raw_config, raw_bundle, small_dataset):
        a = train(tiny_config(raw_config), small_dataset, bundle=raw_bundle)
        b = train(tiny_config(raw_config, seed=1), small_dataset, bundle=raw_bundle)
        assert a.losses != b.losses

    def test_non_finite_loss_aborts(self, raw_config, raw_bundle, small_dataset, tmp_path, monkeypatch):
        import usd_fss.model as model

        monkeypatch.setattr(model, "prediction_loss", lambda p, m: p.sum() * float("nan"))
        with pytest.raises(TrainingError, match="non-finite loss at step 0"):
            train(tiny_config(raw_config), small_dataset, out_dir=tmp_path, bundle=raw_bundle)
        dump = torch.load(tmp_path / "nonfinite-step0.pt", weights_only=False)
        assert len(dump["episodes"]) == 2

    def test_epoch_step_count(self):
        cfg = TrainConfig()
        assert total_steps(cfg, 120) == 50 * 15
        assert total_steps(cfg.with_overrides({"steps": 7}), 120) == 7


class TestCountLearnables:
    def test_frozen_is_zero(self, raw_config, raw_bundle):
        from usd_fss.model import USDNet

        net = USDNet(tiny_config(raw_config))
        for p in net.parameters():
            p.requires_grad_(False)
        assert count_learnables(net) == 0

    def test_one_by_one_conv(self):
        body = nn.Sequential(nn.Linear(3, 2))
        before = count_learnables(body)
        body.append(nn.Conv2d(4, 4, 1))
        # 4 outputs x 4 inputs + 4 biases
        assert count_learnables(body) - before == 20

    def test_stable_across_forward(self, short_run, probe):
        result, _, _ = short_run
        n = count_learnables(result.pipeline.net)
        ep = probe
        result.pipeline.predict([ep], result.store, [episode_rng(0, 0)])
        assert count_learnables(result.pipeline.net) == n


class TestCheckpoint:
    def test_round_trip_bit_identical(self, short_run, raw_bundle, probe):
        result, out, _ = short_run
        ep = probe
        before = result.pipeline.predict([ep], result.store, [episode_rng(0, 1)])
        loaded = load_checkpoint(out / "checkpoint.pt", bundle=raw_bundle)
        after = loaded.predict([ep], FeatureStore(raw_bundle, loaded.cfg), [episode_rng(0, 1)])
        np.testing.assert_array_equal(before, after)
        assert state_equal(result.pipeline.net, loaded.net)

    def test_contents(self, short_run):
        _, out, _ = short_run
        data = torch.load(out / "checkpoint.pt", weights_only=False)
        assert data["step"] == 10
        assert data["optimizer_state"] is not None
        assert data["manifest"]["learnable_parameters"] > 0
        assert TrainConfig.from_dict(data["config"]).steps == 10

    def test_different_encoder_seed_refused(self, short_run, tmp_path):
        _, out, _ = short_run
        other = FrozenBundle.create(EncoderConfig(seed=3, pretrain_steps=0, sam_pretrain_steps=0), tmp_path)
        with pytest.raises(CheckpointError, match="frozen weights differ"):
            load_checkpoint(out / "checkpoint.pt", bundle=other)

    def test_corrupted_file(self, tmp_path):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError, match="corrupted"):
            load_checkpoint(bad)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "nope.pt")

    def test_save_without_optimizer(self, short_run, raw_bundle, tmp_path):
        result, _, _ = short_run
        save_checkpoint(tmp_path / "c.pt", result.pipeline)
        loaded = load_checkpoint(tmp_path / "c.pt", bundle=raw_bundle)
        assert state_equal(loaded.net, result.pipeline.net)


class TestConfig:
    def test_documented_defaults(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 4e-4
        assert cfg.epochs == 50
        assert cfg.batch_size == 8
        assert (cfg.alpha, cfg.beta) == (0.5, 0.5)
        assert cfg.lgm.avg_last == 4 and cfg.lgm.tau == 0.01
        assert (cfg.text.foreground, cfg.text.background) == ("a photo of {}", "a photo without {}")

    def test_json_round_trip(self, tmp_path):
        cfg = TrainConfig().with_overrides({"lgm.tau": 0.02, "vtpg.tokens": 4, "fold": 2})
        cfg.dump(tmp_path / "c.json")
        again = TrainConfig.load(tmp_path / "c.json")
        assert again == cfg

    @pytest.mark.parametrize(
        "override", [{"nope": 1}, {"lgm.nope": 1}, {"fold": 4}, {"alpha": 1.5}, {"feature_source": "x"}]
    )
    def test_invalid(self, override):
        with pytest.raises(ValueError):
            TrainConfig().with_overrides(override)

    def test_image_size_propagates(self):
        assert TrainConfig().with_overrides({"image_size": 32}).encoder.image_size == 32
