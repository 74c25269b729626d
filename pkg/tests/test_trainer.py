import json

import numpy as np
import pytest

from cin import trainer
from cin.backbone import BackboneConfig
from cin.checks import micro_batch, micro_model_config
from cin.data import PairBatch, SyntheticTaskConfig, generate
from cin.errors import CheckpointError, ConfigError, DivergenceError, NonFiniteError
from cin.model import ModelConfig, ModelParams
from cin.tensor import GradTape, backward
from cin.trainer import (MAGIC, TrainConfig, compute_losses, fit, infer, load_checkpoint, lr_at,
                         predict_proba, save_checkpoint, train_step)

MC = micro_model_config()
TINY_DATA = SyntheticTaskConfig(num_superclasses=2, subclasses_per_superclass=2, image_size=8, glyph_size=3,
                                train_per_class=5, val_per_class=3, seed=2)
TINY_MC = ModelConfig(BackboneConfig(input_size=8, channels=(3, 4), stages=2), num_classes=4, embed_dim=6)


def micro_pair_batch(rng):
    images, labels, y_ab = micro_batch(rng)
    return PairBatch(images, labels, y_ab, np.arange(4))


class TestSchedule:
    def test_schedule_values(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == 0.001
        assert lr_at(20, cfg) == 0.0005
        assert lr_at(45, cfg) == 0.00025
        assert lr_at(19, cfg) == 0.001

    def test_library_defaults(self):
        cfg = TrainConfig()
        assert (cfg.base_lr, cfg.lr_decay, cfg.lr_decay_every, cfg.weight_decay) == (0.001, 0.5, 20, 2e-4)
        assert (cfg.alpha, cfg.beta, cfg.momentum, cfg.epochs) == (2.0, 0.5, 0.0, 40)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_at(-1, TrainConfig())

    @pytest.mark.parametrize("kw", [dict(base_lr=0), dict(lr_decay_every=0), dict(beta=-1), dict(clip_norm=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestTrainStep:
    def test_zero_lr_keeps_params(self, rng):
        params = ModelParams.initialize(MC, 0)
        step = train_step(micro_pair_batch(rng), params, MC, TrainConfig(), lr=0.0)
        assert step.params.bitwise_equal(params)
        assert np.isfinite([step.loss_total, step.loss_soft, step.loss_cont]).all()
        assert step.loss_total == pytest.approx(step.loss_soft + 2.0 * step.loss_cont)

    def test_small_step_descends(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            params = ModelParams.initialize(MC, seed)
            batch = micro_pair_batch(rng)
            cfg = TrainConfig(weight_decay=0.0)
            before = train_step(batch, params, MC, cfg, lr=1e-4)
            after = compute_losses(batch.images, batch.labels, batch.y_ab, before.params, MC, cfg)
            assert after.total.item() < before.loss_total

    def test_weight_decay_on_weights_only(self, rng):
        params = ModelParams.initialize(MC, 0)
        cfg = TrainConfig(cci_enabled=False, weight_decay=0.1)
        step = train_step(micro_pair_batch(rng), params, MC, cfg, lr=0.5)
        # without the contrastive branch psi and the projection have zero gradient
        for name in ("psi.weight", "proj.weight"):
            assert not step.grads[name].data.any()
            np.testing.assert_allclose(step.params[name].data, params[name].data * (1 - 0.5 * 0.1), rtol=1e-15)
        for name in ("psi.bias", "proj.bias"):
            assert np.array_equal(step.params[name].data, params[name].data)

    def test_momentum_accumulates(self, rng):
        params = ModelParams.initialize(MC, 0)
        batch = micro_pair_batch(rng)
        cfg = TrainConfig(momentum=0.9, weight_decay=0.0)
        first = train_step(batch, params, MC, cfg, lr=0.01)
        second = train_step(batch, first.params, MC, cfg, lr=0.01, velocity=first.velocity)
        g = second.grads["classifier.bias"].data
        expected = first.params["classifier.bias"].data - 0.01 * (0.9 * first.velocity["classifier.bias"] + g)
        np.testing.assert_allclose(second.params["classifier.bias"].data, expected, rtol=0, atol=1e-15)

    def test_clipping_bounds_update(self, rng):
        params = ModelParams.initialize(MC, 0)
        batch = micro_pair_batch(rng)
        cfg = TrainConfig(weight_decay=0.0, clip_norm=1e-3)
        step = train_step(batch, params, MC, cfg, lr=1.0)
        moved = np.sqrt(sum(np.sum((step.params[n].data - params[n].data) ** 2) for n in params))
        assert moved == pytest.approx(1e-3)

    def test_non_finite_becomes_divergence(self, rng, monkeypatch):
        def boom(*a, **k):
            raise NonFiniteError("overflow in loss")

        monkeypatch.setattr(trainer, "compute_losses", boom)
        with pytest.raises(DivergenceError) as err:
            train_step(micro_pair_batch(rng), ModelParams.initialize(MC, 0), MC, TrainConfig())
        assert err.value.term


class TestLossStructure:
    def test_cci_params_only_see_contrastive_loss(self, rng):
        params = ModelParams.initialize(MC, 1)
        images, labels, y_ab = micro_batch(rng)
        with GradTape() as tape:
            losses = compute_losses(images, labels, y_ab, params, MC, TrainConfig())
        soft = backward(losses.soft, tape, params)
        cont = backward(losses.cont, tape, params)
        for name in ("psi.weight", "psi.bias", "proj.weight", "proj.bias"):
            assert not soft[name].data.any()
        for name in ("psi.weight", "psi.bias", "proj.weight"):
            assert cont[name].data.any()
        # the projection bias cancels in e_a - e_b
        assert not cont["proj.bias"].data.any()
        assert not cont["classifier.weight"].data.any()

    def test_zero_gates_match_sci_cont_path(self, rng):
        params = ModelParams.initialize(MC, 2)
        images, labels, y_ab = micro_batch(rng)
        forced = compute_losses(images, labels, y_ab, params, MC, TrainConfig(gates_forced_zero=True))
        psi_zero = params.replace({"psi.weight": np.zeros_like(params["psi.weight"].data),
                                   "psi.bias": np.zeros_like(params["psi.bias"].data)})
        learned_zero = compute_losses(images, labels, y_ab, psi_zero, MC, TrainConfig())
        assert forced.cont.item() == learned_zero.cont.item()

    def test_cci_needs_sci(self, rng):
        mc = ModelConfig(MC.backbone, MC.num_classes, MC.embed_dim, use_sci=False)
        images, labels, y_ab = micro_batch(rng)
        with pytest.raises(ConfigError):
            compute_losses(images, labels, y_ab, ModelParams.initialize(mc, 0), mc, TrainConfig())


class TestInference:
    def test_probabilities(self, rng):
        p = infer(rng.random((8, 8, 3)), ModelParams.initialize(MC, 0), MC)
        assert p.shape == (3,) and abs(p.sum() - 1) < 1e-12

    def test_independent_of_batch_mates(self, rng):
        params = ModelParams.initialize(MC, 0)
        imgs = rng.random((5, 8, 8, 3))
        alone = infer(imgs[2], params, MC)
        assert np.array_equal(predict_proba(imgs, params, MC)[2], alone)
        assert np.array_equal(predict_proba(imgs[::-1], params, MC)[2], alone)

    def test_cci_parameters_do_not_matter(self, rng):
        params = ModelParams.initialize(MC, 0)
        img = rng.random((8, 8, 3))
        moved = params.replace({k: v + rng.normal(size=v.shape) for k, v in params.arrays().items()
                                if k.startswith(("psi.", "proj."))})
        assert infer(img, params, MC).tobytes() == infer(img, moved, MC).tobytes()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = ModelParams.initialize(MC, 9)
        save_checkpoint(params, tmp_path / "p.ckpt", MC, seed=9)
        ck = load_checkpoint(tmp_path / "p.ckpt", expected=MC)
        assert ck.params.bitwise_equal(params) and ck.seed == 9
        assert ck.config_hash == MC.config_hash() and ck.model_config == MC

    def test_layout(self, tmp_path):
        params = ModelParams.initialize(MC, 0)
        raw = save_checkpoint(params, tmp_path / "p.ckpt", MC).read_bytes()
        assert raw[:8] == MAGIC
        hlen = int.from_bytes(raw[8:16], "little")
        header = json.loads(raw[16:16 + hlen])
        first = np.frombuffer(raw[16 + hlen:16 + hlen + 8], dtype="<f8")[0]
        assert first == params[header["names"][0]].data.ravel()[0]

    def test_bad_magic(self, tmp_path):
        path = save_checkpoint(ModelParams.initialize(MC, 0), tmp_path / "p.ckpt", MC)
        raw = bytearray(path.read_bytes())
        raw[0:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_payload_corruption(self, tmp_path):
        path = save_checkpoint(ModelParams.initialize(MC, 0), tmp_path / "p.ckpt", MC)
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0x10
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_class_count_mismatch(self, tmp_path):
        path = save_checkpoint(ModelParams.initialize(MC, 0), tmp_path / "p.ckpt", MC)
        other = ModelConfig(MC.backbone, num_classes=5, embed_dim=MC.embed_dim)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected=other)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.ckpt")


@pytest.fixture(scope="module")
def splits():
    return generate(TINY_DATA)


class TestFit:
    def test_outputs(self, splits, tmp_path):
        cfg = TrainConfig(epochs=2, base_lr=0.01)
        result = fit(splits["train"], splits["val"], TINY_MC, cfg, out_dir=tmp_path)
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        row = json.loads(lines[0])
        assert set(row) == {"epoch", "lr", "loss_total", "loss_soft", "loss_cont", "train_acc", "val_acc"}
        best = load_checkpoint(tmp_path / "best.ckpt", expected=TINY_MC)
        assert best.params.bitwise_equal(result.best_params)
        assert result.best_val_acc == trainer.accuracy(splits["val"], best.params, TINY_MC)

    def test_deterministic(self, splits, tmp_path):
        cfg = TrainConfig(epochs=2, base_lr=0.01, momentum=0.9)
        fit(splits["train"], splits["val"], TINY_MC, cfg, out_dir=tmp_path / "a")
        fit(splits["train"], splits["val"], TINY_MC, cfg, out_dir=tmp_path / "b")
        for name in ("metrics.jsonl", "best.ckpt", "last.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_class_count_mismatch(self, splits):
        with pytest.raises(ConfigError):
            fit(splits["train"], None, MC, TrainConfig(epochs=1))

    def test_divergence_reports_last_good(self, splits, tmp_path, monkeypatch):
        calls = {"n": 0}
        real = trainer.train_step

        def flaky(*a, **k):
            calls["n"] += 1
            if calls["n"] > 1:
                raise DivergenceError("loss_total", float("inf"))
            return real(*a, **k)

        monkeypatch.setattr(trainer, "train_step", flaky)
        monkeypatch.setattr(trainer, "batches_per_epoch", lambda ds: 1)
        with pytest.raises(DivergenceError) as err:
            fit(splits["train"], splits["val"], TINY_MC, TrainConfig(epochs=3), out_dir=tmp_path)
        assert err.value.last_good == tmp_path / "last.ckpt"

    def test_untrained_accuracy_near_chance(self):
        accs = []
        for seed in range(5):
            data = generate(SyntheticTaskConfig(train_per_class=0, val_per_class=25, seed=seed))
            mc = ModelConfig(BackboneConfig())
            accs.append(trainer.accuracy(data["val"], ModelParams.initialize(mc, seed), mc))
        assert all(0.02 <= a <= 0.30 for a in accs), accs
