import json

import pytest

from cin.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from cin.config import RunConfig, resolve
from cin.errors import ConfigError

TINY = {"num_superclasses": 2, "subclasses_per_superclass": 2, "image_size": 8, "glyph_size": 3,
        "train_per_class": 5, "val_per_class": 3, "channels": [3, 4], "stages": 2, "embed_dim": 6,
        "epochs": 2}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "tiny.json").write_text(json.dumps(TINY))
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def dataset(workdir):
    assert run("gen", "--config", "tiny.json", "--out", "data") == EXIT_OK
    return workdir / "data"


class TestConfig:
    def test_defaults_resolve(self):
        assert resolve() == RunConfig()

    def test_unknown_field(self):
        with pytest.raises(ConfigError) as err:
            resolve(overrides={"nope": 1})
        assert err.value.field == "nope"

    def test_variant_preset(self):
        cfg = resolve(overrides={"variant": "plain"})
        assert not cfg.use_sci and not cfg.cci_enabled

    def test_variant_conflict(self):
        with pytest.raises(ConfigError):
            resolve(overrides={"variant": "plain", "use_sci": True})

    def test_file_then_overrides(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"epochs": 3, "seed": 4}))
        cfg = resolve(tmp_path / "c.json", {"seed": 9})
        assert (cfg.epochs, cfg.seed) == (3, 9)


class TestGen:
    def test_writes_manifest_and_config(self, dataset, capsys):
        assert (dataset / "manifest.json").exists()
        assert json.loads((dataset / "run_config.json").read_text())["image_size"] == 8

    def test_same_seed_same_hash(self, workdir, capsys):
        run("gen", "--config", "tiny.json", "--out", "a")
        run("gen", "--config", "tiny.json", "--out", "b")
        lines = capsys.readouterr().out.splitlines()
        assert json.loads(lines[0])["manifest_sha256"] == json.loads(lines[1])["manifest_sha256"]

    def test_non_empty_out_needs_force(self, dataset):
        assert run("gen", "--config", "tiny.json", "--out", "data") == EXIT_USAGE
        assert run("gen", "--config", "tiny.json", "--out", "data", "--force") == EXIT_OK

    def test_invalid_field_names_field(self, workdir, capsys):
        assert run("gen", "--set", "colour=3", "--out", "x") == EXIT_USAGE
        assert "colour" in capsys.readouterr().err

    def test_invalid_value(self, workdir, capsys):
        assert run("gen", "--set", "noise_std=-1", "--out", "x") == EXIT_USAGE
        assert "noise_std" in capsys.readouterr().err


class TestTrainEval:
    def test_one_epoch_one_line(self, dataset):
        assert run("train", "--config", "tiny.json", "--data", dataset, "--out", "r", "--epochs", 1) == EXIT_OK
        assert len((dataset.parent / "r" / "metrics.jsonl").read_text().splitlines()) == 1

    def test_deterministic(self, dataset):
        for out in ("r1", "r2"):
            assert run("train", "--config", "tiny.json", "--data", dataset, "--out", out) == EXIT_OK
        for name in ("metrics.jsonl", "best.ckpt", "last.ckpt", "run_config.json"):
            assert (dataset.parent / "r1" / name).read_bytes() == (dataset.parent / "r2" / name).read_bytes()

    @pytest.mark.parametrize("variant", ["plain", "sci", "sci-cont", "cin"])
    def test_variants(self, dataset, variant):
        assert run("train", "--config", "tiny.json", "--data", dataset, "--out", variant,
                   "--variant", variant, "--epochs", 1) == EXIT_OK
        cfg = json.loads((dataset.parent / variant / "run_config.json").read_text())
        assert cfg["variant"] == variant and cfg["use_sci"] == (variant != "plain")

    def test_eval_reproduces_best(self, dataset, capsys):
        run("train", "--config", "tiny.json", "--data", dataset, "--out", "r")
        summary = json.loads(capsys.readouterr().out)
        assert run("eval", "--config", "tiny.json", "--checkpoint", "r/best.ckpt", "--data", dataset) == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report["top1"] == summary["best_val_top1"]
        assert report["config_hash"] == summary["config_hash"]
        assert report["n"] == 12

    def test_eval_class_mismatch(self, dataset, workdir):
        run("train", "--config", "tiny.json", "--data", dataset, "--out", "r", "--epochs", 1)
        run("gen", "--config", "tiny.json", "--set", "subclasses_per_superclass=3", "--out", "other")
        assert run("eval", "--checkpoint", "r/best.ckpt", "--data", "other") == EXIT_FAIL

    def test_corrupt_checkpoint(self, dataset, workdir):
        (workdir / "bad.ckpt").write_bytes(b"garbage")
        assert run("eval", "--checkpoint", "bad.ckpt", "--data", dataset) == EXIT_FAIL

    def test_missing_dataset(self, workdir):
        assert run("train", "--data", "nowhere", "--out", "r") == EXIT_FAIL


class TestVisualize:
    @pytest.fixture
    def ckpt(self, dataset):
        run("train", "--config", "tiny.json", "--data", dataset, "--out", "r", "--epochs", 1)
        return dataset.parent / "r" / "best.ckpt"

    def test_single(self, ckpt, dataset, workdir):
        assert run("visualize", "--checkpoint", ckpt, "--data", dataset, "--index", 0, "--out", "m") == EXIT_OK
        assert len(list((workdir / "m").glob("*.pgm"))) == 5
        assert (workdir / "m" / "run_config.json").exists()

    def test_pair_needs_two(self, ckpt, dataset):
        assert run("visualize", "--checkpoint", ckpt, "--data", dataset, "--index", 0, "--pair") == EXIT_USAGE

    def test_pair(self, ckpt, dataset, workdir):
        assert run("visualize", "--checkpoint", ckpt, "--data", dataset, "--index", 0, 1, "--pair",
                   "--out", "p") == EXIT_OK
        assert len(list((workdir / "p").glob("*.pgm"))) == 2


class TestGradcheck:
    def test_passes(self, workdir, capsys):
        assert run("gradcheck", "--instances", 3) == EXIT_OK
        rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        assert rows and all(r["passed"] for r in rows)

    def test_sign_bug_fails(self, workdir, monkeypatch):
        import numpy as np

        from cin import tensor as T

        def buggy(z):
            e = np.exp(-(z - z.min(axis=-1, keepdims=True)))
            return e / e.sum(axis=-1, keepdims=True)

        monkeypatch.setattr(T, "_stable_softmax", buggy)
        assert run("gradcheck", "--instances", 3) == EXIT_FAIL


def test_usage_errors(workdir):
    assert run() == EXIT_USAGE
    assert run("frobnicate") == EXIT_USAGE
    assert run("train") == EXIT_USAGE


def test_help(capsys):
    assert run("--help") == EXIT_OK
    out = capsys.readouterr().out
    for cmd in ("gen", "train", "eval", "gradcheck", "visualize"):
        assert cmd in out
