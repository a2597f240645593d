"""Tests for the AdamW optimizer, checkpoint format, and training loop."""

import csv
import json
import struct

import numpy as np
import pytest

from patret.augment import AugmentPolicy, apply_policy
from patret.dataset import generate_synthetic, load_image
from patret.model import (
    GEM_P_MIN,
    BackboneConfig,
    ModelConfig,
    compute_loss,
    init_params,
)
from patret.tensor import Tensor
from patret.train import (
    CheckpointError,
    TrainConfig,
    adamw_step,
    init_optimizer,
    load_checkpoint,
    save_checkpoint,
    toy_train_config,
    train,
)

TINY_BACKBONE = dict(stage_channels=[4, 8], input_size=32)


def tiny_model_config(num_classes=5, head_kind="arcface"):
    return ModelConfig(
        backbone=BackboneConfig(**TINY_BACKBONE),
        num_classes=num_classes,
        embed_dim=16,
        head_kind=head_kind,
    )


def tiny_params(seed=0, **kw):
    return init_params(tiny_model_config(**kw), seed=seed)


def set_grads(params, fill=None, rng=None):
    for _, p in params.named_parameters():
        if fill is not None:
            p.grad = np.full_like(p.data, fill)
        else:
            p.grad = rng.standard_normal(p.data.shape).astype(np.float32)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("traincorpus")
    manifest = generate_synthetic(
        root, num_ids=6, views_per_id=3, image_size=32, stroke_width=2, seed=9
    )
    return manifest


def tiny_train_config(manifest, tmp_path, **overrides):
    base = dict(
        manifest_path=str(manifest.root_dir / "manifest.jsonl"),
        policy=AugmentPolicy(
            crop_size=28, translate_max=2, hflip_prob=0.5, eval_size=32
        ),
        backbone=BackboneConfig(**TINY_BACKBONE),
        embed_dim=16,
        batch_size=8,
        max_iters=6,
        log_every=2,
        eval_every=3,
        checkpoint_path=str(tmp_path / "model.prkt"),
        log_path=str(tmp_path / "log.csv"),
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestAdamWStep:
    def test_zero_grad_and_zero_decay_leave_params_unchanged(self):
        params = tiny_params(seed=1)
        before = {n: p.data.copy() for n, p in params.named_parameters()}
        set_grads(params, fill=0.0)
        state = init_optimizer(params)
        adamw_step(params, state, lr=1e-3, wd=0.0)
        for n, p in params.named_parameters():
            np.testing.assert_array_equal(p.data, before[n])

    def test_missing_grads_treated_as_zero(self):
        params = tiny_params(seed=1)
        before = {n: p.data.copy() for n, p in params.named_parameters()}
        state = init_optimizer(params)
        adamw_step(params, state, lr=1e-3, wd=0.0)
        for n, p in params.named_parameters():
            np.testing.assert_array_equal(p.data, before[n])

    def test_first_step_moves_by_lr_times_sign(self):
        # at t=1 the bias-corrected ratio mhat/sqrt(vhat) collapses to
        # g/|g|, so the update is lr * sign(g) for any grad magnitude
        params = tiny_params(seed=2)
        before = {n: p.data.copy() for n, p in params.named_parameters()}
        rng = np.random.default_rng(0)
        set_grads(params, rng=rng)
        grads = {n: p.grad.copy() for n, p in params.named_parameters()}
        state = init_optimizer(params)
        lr = 1e-3
        adamw_step(params, state, lr=lr, wd=0.0)
        for n, p in params.named_parameters():
            if n == "gem.p":  # clamped separately
                continue
            np.testing.assert_allclose(
                before[n] - p.data, lr * np.sign(grads[n]), rtol=0, atol=lr * 1e-4
            )

    def test_pure_decay_shrinks_weights_multiplicatively(self):
        params = tiny_params(seed=3)
        before = {n: p.data.copy() for n, p in params.named_parameters()}
        set_grads(params, fill=0.0)
        state = init_optimizer(params)
        lr, wd = 1e-3, 5e-4
        adamw_step(params, state, lr=lr, wd=wd)
        for n, p in params.named_parameters():
            expected = before[n] - np.float32(lr * wd) * before[n]
            np.testing.assert_array_equal(p.data, expected)

    def test_first_step_update_bound(self):
        # |delta| <= lr * (1 + wd * |theta|) elementwise at t=1
        params = tiny_params(seed=4)
        before = {n: p.data.copy() for n, p in params.named_parameters()}
        set_grads(params, rng=np.random.default_rng(1))
        state = init_optimizer(params)
        lr, wd = 3e-3, 5e-4
        adamw_step(params, state, lr=lr, wd=wd)
        for n, p in params.named_parameters():
            if n == "gem.p":
                continue
            bound = lr * (1.0 + wd * np.abs(before[n])) + 1e-7
            assert (np.abs(p.data - before[n]) <= bound).all(), n

    def test_nonfinite_grad_names_the_parameter(self):
        params = tiny_params(seed=5)
        set_grads(params, fill=0.0)
        params.neck.fc_weight.grad[0, 0] = np.nan
        state = init_optimizer(params)
        with pytest.raises(FloatingPointError, match="neck.fc_weight"):
            adamw_step(params, state, lr=1e-3, wd=0.0)

    def test_gem_exponent_clamped_at_floor(self):
        params = tiny_params(seed=6)
        params.gem.p.data[:] = GEM_P_MIN + 5e-4
        set_grads(params, fill=0.0)
        params.gem.p.grad[:] = 1.0  # pushes p down by ~lr
        state = init_optimizer(params)
        adamw_step(params, state, lr=1e-3, wd=0.0)
        np.testing.assert_array_equal(
            params.gem.p.data, np.full_like(params.gem.p.data, GEM_P_MIN)
        )

    def test_step_counter_advances(self):
        params = tiny_params(seed=7)
        set_grads(params, fill=0.0)
        state = init_optimizer(params)
        adamw_step(params, state, lr=1e-3, wd=0.0)
        adamw_step(params, state, lr=1e-3, wd=0.0)
        assert state.step == 2


class TestTrainConfig:
    def make_config(self, **overrides):
        base = dict(
            manifest_path="data/manifest.jsonl",
            policy=AugmentPolicy(
                crop_size=48,
                translate_max=4,
                eval_size=64,
                ablation_random_resized_crop=True,
                ablation_rrc_scale=(0.5, 0.9),
            ),
            backbone=BackboneConfig([16, 32], input_size=64),
            head_kind="softmax",
            batch_size=16,
            max_iters=100,
        )
        base.update(overrides)
        return TrainConfig(**base)

    def test_json_round_trip_preserves_everything(self, tmp_path):
        cfg = self.make_config()
        path = cfg.save(tmp_path / "cfg.json")
        loaded = TrainConfig.load(path)
        assert loaded == cfg
        assert isinstance(loaded.policy.ablation_rrc_scale, tuple)

    def test_dict_round_trip(self):
        cfg = self.make_config()
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize(
        "field, value, message",
        [
            ("batch_size", 1, "batch_size"),
            ("max_iters", 0, "max_iters"),
            ("lr", 0.0, "lr"),
            ("weight_decay", -1e-4, "weight_decay"),
            ("log_every", 0, "log_every"),
        ],
    )
    def test_validation_rejects_bad_values(self, field, value, message):
        with pytest.raises(ValueError, match=message):
            self.make_config(**{field: value})

    def test_load_reports_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ValueError, match="bad train config"):
            TrainConfig.load(path)

    def test_model_config_carries_head_settings(self):
        cfg = self.make_config(head_kind="arcface", s=30.0, margin=0.25)
        mc = cfg.model_config(num_classes=17)
        assert mc.num_classes == 17
        assert mc.head_kind == "arcface"
        assert mc.s == 30.0 and mc.margin == 0.25
        assert mc.backbone == cfg.backbone

    def test_toy_preset_defaults_and_overrides(self):
        cfg = toy_train_config("m.jsonl", seed=4, head_kind="softmax")
        assert cfg.backbone.stage_channels == [16, 32, 64, 128]
        assert cfg.batch_size == 64
        assert cfg.max_iters == 2000
        assert cfg.policy.eval_size == 64
        assert cfg.seed == 4
        assert cfg.head_kind == "softmax"


class TestCheckpointRoundTrip:
    def randomized_params(self, seed=3):
        params = tiny_params(seed=seed)
        rng = np.random.default_rng(seed + 100)
        params.neck.bn_running_mean = rng.standard_normal(16).astype(np.float32)
        params.neck.bn_running_var = (
            rng.uniform(0.5, 2.0, 16).astype(np.float32)
        )
        return params

    def test_parameters_and_buffers_survive_bitwise(self, tmp_path):
        params = self.randomized_params()
        path = save_checkpoint(
            params, tmp_path / "m.prkt", eval_size=32, pad_value=250,
            meta={"iter": 7},
        )
        bundle = load_checkpoint(path)
        for (name, orig), (name2, restored) in zip(
            params.named_parameters(), bundle.params.named_parameters()
        ):
            assert name == name2
            np.testing.assert_array_equal(restored.data, orig.data)
        np.testing.assert_array_equal(
            bundle.params.neck.bn_running_mean, params.neck.bn_running_mean
        )
        np.testing.assert_array_equal(
            bundle.params.neck.bn_running_var, params.neck.bn_running_var
        )
        assert bundle.eval_size == 32
        assert bundle.pad_value == 250
        assert bundle.meta == {"iter": 7}
        assert len(bundle.fingerprint) == 64

    def test_architecture_round_trips(self, tmp_path):
        params = tiny_params(seed=1, head_kind="softmax", num_classes=7)
        path = save_checkpoint(params, tmp_path / "m.prkt", eval_size=32)
        bundle = load_checkpoint(path)
        assert bundle.params.config == params.config

    def test_embed_dim_guard(self, tmp_path):
        path = save_checkpoint(tiny_params(), tmp_path / "m.prkt", eval_size=32)
        bundle = load_checkpoint(path, expect_embed_dim=16)
        assert bundle.params.config.embed_dim == 16
        with pytest.raises(CheckpointError, match="embed_dim 16 does not match"):
            load_checkpoint(path, expect_embed_dim=512)


class TestCheckpointErrors:
    @pytest.fixture()
    def good_path(self, tmp_path):
        return save_checkpoint(tiny_params(), tmp_path / "m.prkt", eval_size=32)

    def test_wrong_magic(self, good_path):
        blob = bytearray(good_path.read_bytes())
        blob[:4] = b"JUNK"
        good_path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="not a PRKT checkpoint"):
            load_checkpoint(good_path)

    def test_unsupported_version(self, good_path):
        blob = bytearray(good_path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        good_path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(good_path)

    def test_truncated_file(self, good_path):
        blob = good_path.read_bytes()
        good_path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(good_path)

    def test_corrupt_header_json(self, good_path):
        blob = bytearray(good_path.read_bytes())
        header_len = struct.unpack("<I", blob[8:12])[0]
        blob[12] = ord("X")  # header starts with '{'
        good_path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="bad checkpoint header"):
            load_checkpoint(good_path)
        assert header_len > 0

    def _header_end(self, blob):
        header_len = struct.unpack("<I", blob[8:12])[0]
        return 12 + header_len

    def test_missing_parameter_section(self, good_path):
        blob = bytearray(good_path.read_bytes())
        end = self._header_end(blob)
        good_path.write_bytes(bytes(blob[:end]) + struct.pack("<I", 0))
        with pytest.raises(CheckpointError, match="missing parameter section"):
            load_checkpoint(good_path)

    def test_shape_mismatch_names_the_section(self, good_path, tmp_path):
        blob = bytearray(good_path.read_bytes())
        end = self._header_end(blob)
        name = b"backbone.0.weight"
        wrong = np.zeros((2, 2), dtype="<f4")
        section = (
            struct.pack("<H", len(name)) + name
            + struct.pack("<B", wrong.ndim)
            + struct.pack("<2I", *wrong.shape)
            + wrong.tobytes()
        )
        good_path.write_bytes(
            bytes(blob[:end]) + struct.pack("<I", 1) + section
        )
        with pytest.raises(CheckpointError, match="backbone.0.weight"):
            load_checkpoint(good_path)


class TestTrainLoop:
    def test_rejects_batch_larger_than_train_split(self, tiny_corpus, tmp_path):
        cfg = tiny_train_config(tiny_corpus, tmp_path, batch_size=64)
        with pytest.raises(ValueError, match="12 images but batch_size is 64"):
            train(cfg)

    def test_identical_seeds_give_bitwise_identical_artifacts(
        self, tiny_corpus, tmp_path
    ):
        runs = {}
        for tag in ("a", "b"):
            sub = tmp_path / tag
            sub.mkdir()
            cfg = tiny_train_config(tiny_corpus, sub, seed=11)
            result = train(cfg)
            runs[tag] = (
                result.checkpoint_path.read_bytes(),
                result.log_path.read_text(),
                result.losses,
            )
        assert runs["a"][0] == runs["b"][0]
        assert runs["a"][1] == runs["b"][1]
        assert runs["a"][2] == runs["b"][2]

    def test_different_seeds_diverge(self, tiny_corpus, tmp_path):
        losses = {}
        for seed in (1, 2):
            sub = tmp_path / f"s{seed}"
            sub.mkdir()
            cfg = tiny_train_config(tiny_corpus, sub, seed=seed, max_iters=3)
            losses[seed] = train(cfg).losses
        assert losses[1] != losses[2]

    def test_result_and_log_contents(self, tiny_corpus, tmp_path):
        cfg = tiny_train_config(tiny_corpus, tmp_path, seed=3)
        seen = []
        result = train(cfg, progress=lambda it, loss: seen.append(it))
        assert len(result.losses) == cfg.max_iters
        assert result.checkpoint_path.exists()
        assert sorted(result.val_reports) == [3, 6]
        assert result.best_val_map == max(
            r.mean_ap for r in result.val_reports.values()
        )
        assert result.best_checkpoint_path is not None
        assert result.best_checkpoint_path.exists()
        best = load_checkpoint(result.best_checkpoint_path)
        assert best.meta["val_mAP"] == result.best_val_map

        with open(result.log_path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0]) == ["iter", "loss", "val_mAP", "val_rank1"]
        assert [int(r["iter"]) for r in rows] == [2, 3, 4, 6]
        by_iter = {int(r["iter"]): r for r in rows}
        assert by_iter[2]["val_mAP"] == ""
        assert float(by_iter[3]["val_mAP"]) == pytest.approx(
            result.val_reports[3].mean_ap, abs=1e-6
        )
        assert seen == [2, 3, 4, 6]

    def test_checkpoint_meta_records_final_iteration(self, tiny_corpus, tmp_path):
        cfg = tiny_train_config(tiny_corpus, tmp_path, seed=5)
        result = train(cfg)
        bundle = load_checkpoint(result.checkpoint_path)
        assert bundle.meta["iter"] == cfg.max_iters
        assert bundle.eval_size == cfg.policy.eval_size
        assert bundle.pad_value == cfg.policy.pad_value


class TestFrozenBatchDescent:
    @pytest.mark.parametrize("head_kind", ["arcface", "softmax"])
    def test_loss_strictly_decreases_over_first_ten_steps(
        self, tiny_corpus, head_kind
    ):
        entries = tiny_corpus.split_entries("train")
        classes = sorted({e.patent_id for e in entries})
        class_index = {pid: i for i, pid in enumerate(classes)}
        policy = AugmentPolicy(
            crop_size=32, translate_max=0, hflip_prob=0.0, eval_size=32
        )
        rng = np.random.default_rng(0)
        batch = np.stack(
            [
                apply_policy(load_image(tiny_corpus, e), policy, rng, train=False).data
                for e in entries
            ]
        )
        labels = np.array([class_index[e.patent_id] for e in entries], dtype=np.int64)

        params = init_params(
            tiny_model_config(num_classes=len(classes), head_kind=head_kind), seed=1
        )
        state = init_optimizer(params)
        losses = []
        for _ in range(10):
            params.zero_grad()
            loss = compute_loss(params, Tensor(batch), labels, "train")
            losses.append(loss.item())
            loss.backward()
            adamw_step(params, state, lr=1e-3, wd=5e-4)
        assert all(b < a for a, b in zip(losses, losses[1:])), losses
