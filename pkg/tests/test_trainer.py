"""Schedules, checkpointing, resume and run-to-run determinism."""

import json
import math

import numpy as np
import pytest
import torch

from changecap.config import TrainConfig
from changecap.errors import ConfigError, MissingArtifactError
from changecap.trainer import (RngBundle, load_caption_model, lr_at,
                               param_hash, read_checkpoint_config,
                               train_stage1, train_stage2)
from conftest import tiny_train_config


class TestLrAt:
    def test_stage1_warmup_endpoints(self):
        cfg = TrainConfig(stage=1)   # full-scale defaults
        assert lr_at(0, cfg) == pytest.approx(1e-6)
        assert lr_at(5000, cfg) == pytest.approx(1e-4)
        assert lr_at(10_000, cfg) == pytest.approx(1e-4)

    def test_stage1_linear_in_between(self):
        cfg = TrainConfig(stage=1)
        assert lr_at(2500, cfg) == pytest.approx((1e-6 + 1e-4) / 2)

    def test_stage2_decoder_warmup(self):
        cfg = TrainConfig(stage=2)
        total = 1000
        enc, dec = lr_at(0, cfg, total)
        assert dec == pytest.approx(0.0)
        enc, dec = lr_at(100, cfg, total)   # 10% of total
        assert dec == pytest.approx(5e-5)
        enc, dec = lr_at(999, cfg, total)
        assert dec == pytest.approx(5e-5)

    def test_stage2_encoder_constant(self):
        cfg = TrainConfig(stage=2)
        for step in (0, 17, 500, 999):
            enc, _ = lr_at(step, cfg, 1000)
            assert enc == pytest.approx(5e-5)

    def test_negative_step_rejected(self):
        with pytest.raises(ConfigError):
            lr_at(-1, TrainConfig(stage=1))


class TestStage1Training:
    def test_first_step_loss_near_closed_form(self, tiny_dataset, tmp_path):
        cfg = tiny_train_config(steps=1, K_cb=32)
        ckpt = train_stage1(cfg, tiny_dataset, tmp_path / "s1")
        entry = json.loads(
            (ckpt / "log.jsonl").read_text().splitlines()[0])
        assert entry["msm"] == pytest.approx(math.log(32), abs=1e-3)
        assert entry["align"] == pytest.approx(2 * math.log(2), abs=1e-3)
        assert entry["csy"] == pytest.approx(2 * math.log(2), abs=1e-3)
        assert entry["total"] == pytest.approx(
            math.log(32) + 4 * math.log(2), abs=3e-3)
        assert entry["lr"] == pytest.approx(cfg.lr_start)

    def test_loss_toggles_drop_terms(self, tiny_dataset, tmp_path):
        cfg = tiny_train_config(steps=2, use_align=False, use_csy=False)
        ckpt = train_stage1(cfg, tiny_dataset, tmp_path / "s1")
        entry = json.loads((ckpt / "log.jsonl").read_text().splitlines()[0])
        assert "align" not in entry and "csy" not in entry

    def test_same_seed_same_hash(self, tiny_dataset, tmp_path):
        cfg = tiny_train_config(steps=6)
        from changecap.procnet import ProcedureEncoder
        from changecap.trainer import load_model_state

        h = []
        for name in ("a", "b"):
            ckpt = train_stage1(cfg, tiny_dataset, tmp_path / name)
            model = ProcedureEncoder(read_checkpoint_config(ckpt))
            load_model_state(model, ckpt)
            h.append(param_hash(model))
        assert h[0] == h[1]

    def test_resume_matches_uninterrupted(self, tiny_dataset, tmp_path):
        full_cfg = tiny_train_config(steps=16)
        ckpt_full = train_stage1(full_cfg, tiny_dataset, tmp_path / "full")
        full_losses = [json.loads(l)["total"] for l in
                       (ckpt_full / "log.jsonl").read_text().splitlines()]

        part_cfg = tiny_train_config(steps=6)
        part_dir = tmp_path / "part"
        train_stage1(part_cfg, tiny_dataset, part_dir)
        resumed_cfg = tiny_train_config(steps=16)
        train_stage1(resumed_cfg, tiny_dataset, part_dir,
                     resume_from=part_dir)
        resumed_losses = [json.loads(l)["total"] for l in
                          (part_dir / "log.jsonl").read_text().splitlines()]
        assert len(resumed_losses) == 16
        for a, b in zip(full_losses[6:], resumed_losses[6:]):
            assert a == pytest.approx(b, rel=1e-5)

    def test_checkpoint_contents(self, tiny_dataset, tmp_path):
        cfg = tiny_train_config(steps=2)
        ckpt = train_stage1(cfg, tiny_dataset, tmp_path / "s1")
        for name in ("params.npz", "optim.npz", "config.txt", "rng.json",
                     "meta.json", "torch_rng.npy", "vocab.txt",
                     "embedder.blob"):
            assert (ckpt / name).exists(), name
        with np.load(ckpt / "params.npz") as npz:
            assert all(npz[k].dtype == np.float32 for k in npz.files)
        meta = json.loads((ckpt / "meta.json").read_text())
        assert meta["step"] == 2


class TestStage2Training:
    def test_scratch_run_and_eval_log(self, tiny_dataset, tmp_path):
        cfg = tiny_train_config(stage=2, epochs=2, batch_size=8)
        ckpt = train_stage2(cfg, tiny_dataset, tmp_path / "s2")
        lines = [json.loads(l) for l in
                 (ckpt / "log.jsonl").read_text().splitlines()]
        val_entries = [l for l in lines if "val_loss" in l]
        assert len(val_entries) == 2
        model, loaded_cfg = load_caption_model(ckpt)
        assert loaded_cfg.stage == 2

    def test_stage1_weight_transfer_names_and_shapes(self, tiny_dataset,
                                                     tmp_path):
        cfg1 = tiny_train_config(steps=2)
        s1 = train_stage1(cfg1, tiny_dataset, tmp_path / "s1")
        cfg2 = tiny_train_config(stage=2, epochs=1, batch_size=8)
        s2 = train_stage2(cfg2, tiny_dataset, tmp_path / "s2", stage1_ckpt=s1)
        with np.load(s1 / "params.npz") as p1, np.load(s2 / "params.npz") as p2:
            enc_names = {k[len("encoder."):] for k in p2.files
                         if k.startswith("encoder.")}
            assert enc_names == set(p1.files)
            for name in p1.files:
                assert p1[name].shape == p2["encoder." + name].shape

    def test_stage1_init_actually_copied(self, tiny_dataset, tmp_path):
        from changecap.captioner import CaptionModel
        from changecap.trainer import init_encoder_from_stage1

        cfg1 = tiny_train_config(steps=2)
        s1 = train_stage1(cfg1, tiny_dataset, tmp_path / "s1")
        cfg2 = tiny_train_config(stage=2, vocab_size=29)
        model = CaptionModel(cfg2)
        before = model.encoder.mask_embedding.detach().clone()
        init_encoder_from_stage1(model, s1)
        with np.load(s1 / "params.npz") as p1:
            torch.testing.assert_close(
                model.encoder.mask_embedding.detach(),
                torch.from_numpy(p1["mask_embedding"]))
        assert not torch.equal(model.encoder.mask_embedding.detach(), before)

    def test_dimension_mismatch_errors(self, tiny_dataset, tmp_path):
        cfg1 = tiny_train_config(steps=1)
        s1 = train_stage1(cfg1, tiny_dataset, tmp_path / "s1")
        from changecap.captioner import CaptionModel
        from changecap.trainer import init_encoder_from_stage1

        bad = tiny_train_config(stage=2, d=64, heads=4, vocab_size=29)
        model = CaptionModel(bad)
        with pytest.raises(ConfigError):
            init_encoder_from_stage1(model, s1)

    def test_frozen_embedder_unchanged_by_training(self, tiny_dataset,
                                                   tmp_path):
        from changecap.data import load_artifacts

        _, emb_before = load_artifacts(tiny_dataset)
        hash_before = emb_before.params_hash()
        cfg = tiny_train_config(stage=2, epochs=1, batch_size=8)
        train_stage2(cfg, tiny_dataset, tmp_path / "s2")
        _, emb_after = load_artifacts(tiny_dataset)
        assert emb_after.params_hash() == hash_before

    def test_full_two_stage_determinism(self, tiny_dataset, tmp_path):
        hashes = []
        for tag in ("x", "y"):
            cfg1 = tiny_train_config(steps=4, seed=7)
            s1 = train_stage1(cfg1, tiny_dataset, tmp_path / f"{tag}1")
            cfg2 = tiny_train_config(stage=2, epochs=1, batch_size=8, seed=7)
            s2 = train_stage2(cfg2, tiny_dataset, tmp_path / f"{tag}2",
                              stage1_ckpt=s1)
            model, _ = load_caption_model(s2)
            hashes.append(param_hash(model))
        assert hashes[0] == hashes[1]


class TestRngBundle:
    def test_state_round_trip(self):
        rngs = RngBundle.seeded(5)
        rngs.data.integers(0, 100, 10)
        state = rngs.state()
        expect = rngs.data.integers(0, 1000, 5).tolist()
        rngs.restore(state)
        assert rngs.data.integers(0, 1000, 5).tolist() == expect

    def test_streams_independent(self):
        rngs = RngBundle.seeded(0)
        a = rngs.data.integers(0, 10 ** 9)
        b = rngs.mask.integers(0, 10 ** 9)
        c = rngs.neg.integers(0, 10 ** 9)
        assert len({a, b, c}) == 3
