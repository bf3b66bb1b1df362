import json

import numpy as np
import pytest

from ssat_forge.checkpoint import load_checkpoint
from ssat_forge.cli import augmentation_for, load_datasets, main, thread_limit
from ssat_forge.config import SpecError, parse_spec
from ssat_forge.train import run_experiment

TINY = """
seed = 2
[model.encoder]
image_size = 16
patch_size = 4
dim = 8
depth = 1
heads = 2
mlp_ratio = 2.0
[model.decoder]
dim = 8
depth = 1
heads = 2
mlp_ratio = 2.0
[train]
epochs = 2
warmup_epochs = 1
batch_size = 4
base_lr = 0.01
[data]
per_class = 4
test_per_class = 2
image_size = 16
[data.augment]
rand_n = 1
[diagnostics]
slice_size = 6
batch_size = 3
iterations = 4
top_k = 2
"""


@pytest.fixture
def tiny_spec(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestFlops:
    def test_prints_all_modes(self, tmp_path, capsys):
        spec = tmp_path / "vit_t.toml"
        spec.write_text(
            "[model.encoder]\nimage_size = 224\npatch_size = 16\ndim = 192\ndepth = 12\nheads = 3\n[data]\nclasses = 1000\n"
        )
        code, out, _ = _run(["flops", "--config", spec], capsys)
        assert code == 0
        assert "scratch       1.2537 GMACs" in out
        assert "ssat          1.6767 GMACs" in out
        assert "ssl_pretrain" in out


class TestErrors:
    def test_unknown_key_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("[train]\nlamda = 0.2\n")
        code, _, err = _run(["train", "--config", bad], capsys)
        assert code == 2 and "train.lamda" in err

    @pytest.mark.parametrize("value", ["-0.1", "1.5"])
    def test_perturb_out_of_range(self, tiny_spec, capsys, value):
        code, _, err = _run(["eval", "--config", tiny_spec, "--perturb", value], capsys)
        assert code == 2 and "--perturb" in err

    def test_missing_checkpoint(self, tiny_spec, tmp_path, capsys):
        code, _, err = _run(["eval", "--config", tiny_spec, "--out", tmp_path / "none"], capsys)
        assert code == 2 and "error" in err

    def test_bad_lambda_flag(self, tiny_spec, capsys):
        code, _, err = _run(["train", "--config", tiny_spec, "--lambda", "2"], capsys)
        assert code == 2 and "train.lam" in err


class TestThreads:
    @pytest.mark.parametrize("raw", ["0", "-3", "many"])
    def test_invalid(self, raw):
        with pytest.raises(SpecError, match="SSAT_THREADS"):
            with thread_limit({"SSAT_THREADS": raw}):
                pass

    def test_valid_and_unset(self):
        with thread_limit({"SSAT_THREADS": "1"}):
            pass
        with thread_limit({}):
            pass


class TestEndToEnd:
    def test_train_is_byte_reproducible(self, tiny_spec, tmp_path, capsys):
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            code, stdout, _ = _run(["train", "--config", tiny_spec, "--out", out], capsys)
            assert code == 0 and "ssat: final accuracy" in stdout
        a, b = ((o / "metrics.csv").read_bytes() for o in outs)
        assert a == b
        lines = a.decode().splitlines()
        assert lines[0].startswith("# spec_digest=")
        assert lines[1] == "epoch,l_cls,l_ssat,l_total,lr,eval_acc"
        assert len(lines) == 4
        sa, sb = (json.loads((o / "summary.json").read_text()) for o in outs)
        sa.pop("wall_time"), sb.pop("wall_time")
        assert sa == sb

    def test_train_eval_diagnose(self, tiny_spec, tmp_path, capsys):
        out = tmp_path / "run"
        assert _run(["train", "--config", tiny_spec, "--out", out, "--mode", "scratch"], capsys)[0] == 0
        ckpt = load_checkpoint(out / "checkpoints" / "last.ckpt")
        assert ckpt.epoch == 2

        assert _run(["eval", "--config", tiny_spec, "--out", out], capsys)[0] == 0
        clean = json.loads((out / "eval.json").read_text())
        assert clean["samples"] == 6 and 0.0 <= clean["accuracy"] <= 1.0

        assert _run(["eval", "--config", tiny_spec, "--out", out, "--perturb", "0"], capsys)[0] == 0
        zero = json.loads((out / "eval_perturb_0.json").read_text())
        assert zero["accuracy"] == clean["accuracy"]

        assert _run(["diagnose", "--config", tiny_spec, "--out", out], capsys)[0] == 0
        names = {p.name for p in (out / "diagnostics").iterdir()}
        assert {"attention.csv", "distance.csv", "variance.csv", "spectrum.csv"} <= names

    def test_resume_flag_matches_uninterrupted(self, tiny_spec, tmp_path, capsys):
        full = tmp_path / "full"
        assert _run(["train", "--config", tiny_spec, "--out", full], capsys)[0] == 0
        # interrupt a run with the same spec after one epoch, then finish it from the CLI
        spec = parse_spec(tiny_spec, {"out": str(tmp_path / "cut")})
        train, test = load_datasets(spec)
        run_experiment(
            spec.train_config(),
            train,
            test,
            spec.encoder_config(train.num_classes),
            spec.decoder_config(),
            augmentation_for(spec),
            checkpoint_dir=tmp_path / "cut" / "checkpoints",
            stop_after=1,
        )
        resumed = tmp_path / "resumed"
        cut = tmp_path / "cut" / "checkpoints" / "last.ckpt"
        assert load_checkpoint(cut).epoch == 1
        assert _run(["train", "--config", tiny_spec, "--out", resumed, "--resume", cut], capsys)[0] == 0
        assert (resumed / "metrics.csv").read_bytes() == (full / "metrics.csv").read_bytes()
        a = load_checkpoint(resumed / "checkpoints" / "last.ckpt")
        b = load_checkpoint(full / "checkpoints" / "last.ckpt")
        assert a.optimizer_step == b.optimizer_step and a.rng_state == b.rng_state
        for name in b.params:
            assert np.array_equal(a.params[name], b.params[name])
            assert np.array_equal(a.exp_avg_sq[name], b.exp_avg_sq[name])
