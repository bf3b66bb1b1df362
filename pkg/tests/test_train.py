import dataclasses
import math

import numpy as np
import pytest

from ssat_forge.checkpoint import load_checkpoint
from ssat_forge.data import generate_synthetic
from ssat_forge.ssat import DecoderConfig
from ssat_forge.train import (
    LabelAccessError,
    TrainConfig,
    Trainer,
    UnlabeledView,
    evaluate,
    make_augmentation,
    run_experiment,
    run_sslft,
)
from ssat_forge.vit import EncoderConfig

ENC = EncoderConfig(image_size=16, patch_size=4, channels=3, dim=8, depth=2, heads=2, num_classes=3)
DEC = DecoderConfig(dim=8, depth=1, heads=2, mlp_ratio=2)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(3, 4, 16, seed=0), generate_synthetic(3, 3, 16, seed=1, split="test")


def _cfg(**kw):
    base = dict(epochs=2, warmup_epochs=1, batch_size=4, seed=3, base_lr=1e-2)
    return TrainConfig(**{**base, **kw})


def _params(trainer):
    return {n: t.data.copy() for n, t in trainer.vit.named_parameters()}


def _history(metrics):
    # repr keeps NaN entries comparable
    return [repr(dataclasses.replace(e, wall_time=0.0)) for e in metrics.epochs]


def _run(cfg, data, dec=DEC, aug=True, **kw):
    holder = []
    train, test = data
    pipe = make_augmentation(16, cfg.seed, enabled=aug, crop_scale=(0.35, 1.0), rand_n=1)
    metrics = run_experiment(cfg, train, test, ENC, dec, pipe, trainer_out=holder, **kw)
    return metrics, holder[0]


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [dict(mode="mae"), dict(epochs=2, warmup_epochs=3), dict(lam=1.5), dict(mask_ratio=1.0), dict(batch_size=0)],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_default_hyperparameters(self):
        c = TrainConfig()
        assert (c.epochs, c.warmup_epochs, c.base_lr, c.layer_decay, c.lam, c.mask_ratio) == (
            100, 5, 1e-3, 0.75, 0.1, 0.75
        )

    def test_decoder_required(self):
        with pytest.raises(ValueError, match="decoder"):
            Trainer(_cfg(mode="ssat"), ENC, None)

    def test_finetune_needs_checkpoint(self):
        with pytest.raises(FileNotFoundError):
            Trainer(_cfg(mode="finetune"), ENC)


class TestUnlabeled:
    def test_labels_are_refused(self, data):
        view = UnlabeledView(data[0])
        assert len(view) == len(data[0])
        assert view.images.shape == data[0].images.shape
        with pytest.raises(LabelAccessError):
            view.labels


class TestRegimes:
    def test_lambda_one_matches_scratch_trajectory(self, data):
        scratch, ts = _run(_cfg(mode="scratch"), data)
        joint, tj = _run(_cfg(mode="ssat", lam=1.0), data)
        assert [e.l_cls for e in scratch.epochs] == [e.l_cls for e in joint.epochs]
        assert [e.eval_acc for e in scratch.epochs] == [e.eval_acc for e in joint.epochs]
        ps, pj = _params(ts), _params(tj)
        assert all(ps[k].tobytes() == pj[k].tobytes() for k in ps)

    def test_ssat_records_both_losses(self, data):
        m, _ = _run(_cfg(mode="ssat"), data)
        e = m.epochs[-1]
        assert e.l_total == pytest.approx(0.1 * e.l_cls + 0.9 * e.l_ssat, rel=1e-5)
        assert m.flops_per_image > 0

    def test_scratch_reports_nan_reconstruction(self, data):
        m, _ = _run(_cfg(mode="scratch", epochs=1, warmup_epochs=0), data)
        assert math.isnan(m.epochs[0].l_ssat) and m.epochs[0].l_cls > 0

    def test_sslft_transfers_encoder(self, data, tmp_path):
        train, test = data
        pre, ft = run_sslft("sslft-1", 2, _cfg(), train, test, ENC, DEC, workdir=tmp_path)
        assert pre.mode == "ssl_pretrain" and ft.mode == "finetune"
        assert math.isnan(pre.epochs[0].l_cls) and not math.isnan(ft.final_accuracy)
        ckpt = load_checkpoint(tmp_path / "sslft-1-pretrain.ckpt")
        assert any(k.startswith("decoder.") for k in ckpt.params)

    def test_overfits_tiny_set(self, data):
        cfg = _cfg(
            mode="scratch", epochs=100, warmup_epochs=2, mixup=False, label_smoothing=0.0, drop_path=0.0,
            weight_decay=0.0, layer_decay=1.0,
        )
        m, trainer = _run(cfg, data, aug=False)
        assert m.epochs[-1].l_cls < 0.5 * m.epochs[0].l_cls
        assert trainer.evaluate(data[0]) >= 0.9


class TestDeterminism:
    def test_identical_runs(self, data):
        a, ta = _run(_cfg(mode="ssat"), data)
        b, tb = _run(_cfg(mode="ssat"), data)
        assert _history(a) == _history(b)
        pa, pb = _params(ta), _params(tb)
        assert all(pa[k].tobytes() == pb[k].tobytes() for k in pa)

    def test_seed_changes_run(self, data):
        a, _ = _run(_cfg(mode="scratch", seed=1), data)
        b, _ = _run(_cfg(mode="scratch", seed=2), data)
        assert a.epochs[-1].l_cls != b.epochs[-1].l_cls

    @pytest.mark.parametrize("mode", ["scratch", "ssat"])
    def test_resume_equals_uninterrupted(self, data, tmp_path, mode):
        full, tf = _run(_cfg(mode=mode), data)
        _run(_cfg(mode=mode), data, checkpoint_dir=tmp_path, stop_after=1)
        resumed, tr = _run(_cfg(mode=mode), data, resume_from=tmp_path / "last.ckpt")
        assert _history(full) == _history(resumed)
        pf, pr = _params(tf), _params(tr)
        assert all(pf[k].tobytes() == pr[k].tobytes() for k in pf)

    def test_resume_rejects_other_config(self, data, tmp_path):
        _run(_cfg(mode="scratch"), data, checkpoint_dir=tmp_path, stop_after=1)
        with pytest.raises(ValueError, match="different configuration"):
            _run(_cfg(mode="scratch", lam=0.5), data, resume_from=tmp_path / "last.ckpt")


class TestEvaluate:
    def test_zero_perturbation_equals_clean(self, data):
        _, trainer = _run(_cfg(mode="scratch"), data)
        test = data[1]
        assert evaluate(trainer.vit, test, perturb=0.0) == evaluate(trainer.vit, test)

    def test_ssl_pretrain_has_no_accuracy(self, data):
        m, _ = _run(_cfg(mode="ssl_pretrain"), data)
        assert math.isnan(m.final_accuracy)
