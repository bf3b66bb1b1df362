"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line."""

import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest

from ssat_forge import tensor as T
from ssat_forge.checkpoint import load_checkpoint, save_checkpoint
from ssat_forge.cli import augmentation_for, emit_metrics, load_datasets
from ssat_forge.config import parse_spec
from ssat_forge.data import generate_synthetic
from ssat_forge.diag import attention_column_sums, dense_hessian, hessian_vector_product, inter_token_distance, lanczos_spectrum
from ssat_forge.flops import estimate_flops
from ssat_forge.ssat import (
    DecoderConfig,
    init_ssat,
    joint_loss,
    masked_count,
    reconstruction_loss,
    sample_batch_mask,
    sample_mask,
    ssat_step_forward,
)
from ssat_forge.train import TrainConfig, evaluate, make_augmentation, run_experiment
from ssat_forge.vit import EncoderConfig, forward, init_vit

from acceptance_log import verdict
from gradcases import LAYER_CASES, OP_CASES, TOLERANCE, max_gradient_error
from micromlp import MicroMLP

TREND_SPEC = Path(__file__).resolve().parents[1] / "configs" / "trend.toml"

SMALL_ENC = EncoderConfig(image_size=16, patch_size=4, channels=3, dim=8, depth=2, heads=2, num_classes=3)
SMALL_DEC = DecoderConfig(dim=8, depth=1, heads=2, mlp_ratio=2)


def _small_run(data, tmp=None, **kw):
    cfg = TrainConfig(**{**dict(epochs=2, warmup_epochs=1, batch_size=4, seed=5, base_lr=1e-2), **kw})
    holder = []
    pipe = make_augmentation(16, cfg.seed, crop_scale=(0.35, 1.0), rand_n=1)
    extra = {} if tmp is None else tmp
    metrics = run_experiment(cfg, data[0], data[1], SMALL_ENC, SMALL_DEC, pipe, trainer_out=holder, **extra)
    return metrics, holder[0]


def _param_bytes(vit):
    return {n: t.data.tobytes() for n, t in vit.named_parameters()}


@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic(3, 4, 16, seed=0), generate_synthetic(3, 3, 16, seed=1, split="test")


@pytest.fixture(scope="module")
def trained_tiny():
    """A tiny ViT trained long enough to sit clearly above chance."""
    train = generate_synthetic(3, 100, 32, seed=0)
    test = generate_synthetic(3, 30, 32, seed=1000, split="test")
    enc = EncoderConfig(image_size=32, patch_size=8, channels=3, dim=32, depth=2, heads=2, num_classes=3)
    cfg = TrainConfig(
        mode="scratch", epochs=60, warmup_epochs=2, batch_size=32, base_lr=3e-3, weight_decay=0.0,
        layer_decay=1.0, mixup=False, seed=0, eval_every=60,
    )
    holder = []
    run_experiment(cfg, train, test, enc, None, make_augmentation(32, 0, enabled=False), trainer_out=holder)
    return holder[0].vit, test


def test_criterion_1_gradients():
    start = time.perf_counter()
    worst, worst_name = 0.0, ""
    cases = {**{f"op:{k}": v for k, v in OP_CASES.items()}, **{f"layer:{k}": v for k, v in LAYER_CASES.items()}}
    for name, make in cases.items():
        for seed in range(5):
            err = max_gradient_error(make, seed)
            if not err <= worst:
                worst, worst_name = err, name
    elapsed = time.perf_counter() - start
    ok = worst < TOLERANCE and elapsed < 120
    verdict(1, ok, f"{len(cases)} ops/layers x 5 instances, max rel err {worst:.2e} ({worst_name}), {elapsed:.1f}s")


def test_criterion_2_joint_loss(small_data, rng):
    # exact combination
    draws = rng.random((500, 3)) * [1, 10, 10]
    max_ulps = 0.0
    for lam, a, b in draws:
        got = joint_loss(T.tensor(a), T.tensor(b), lam).total.item()
        want = lam * a + (1 - lam) * b
        max_ulps = max(max_ulps, abs(got - want) / np.spacing(want))
    exact = max_ulps <= 1.0

    # degenerate weights
    enc = EncoderConfig(image_size=8, patch_size=4, channels=3, dim=8, depth=2, heads=2, num_classes=3)
    model = init_ssat(init_vit(enc, rng), DecoderConfig(8, 1, 2, 2.0), rng)
    x, y = rng.random((3, 8, 8, 3)), np.array([0, 1, 2])
    g1 = T.backward(ssat_step_forward(model, x, y, 0.75, 1.0, mask_seed=0).total)
    dec_zero = all(not np.any(g1.get(p, 0.0)) for n, p in model.named_parameters() if n.startswith("decoder"))
    g0 = T.backward(ssat_step_forward(model, x, y, 0.75, 0.0, mask_seed=0).total)
    head_zero = all(not np.any(g0.get(p, 0.0)) for n, p in model.vit.named_parameters() if n.startswith("head"))

    # trajectory identity
    scratch, ts = _small_run(small_data, mode="scratch")
    joint, tj = _small_run(small_data, mode="ssat", lam=1.0)
    same = (
        [e.l_cls for e in scratch.epochs] == [e.l_cls for e in joint.epochs]
        and [e.eval_acc for e in scratch.epochs] == [e.eval_acc for e in joint.epochs]
        and _param_bytes(ts.vit) == _param_bytes(tj.vit)
    )
    detail = f"combination within {max_ulps:.1f} ulp, lambda=1 decoder grads zero={dec_zero}, "
    detail += f"lambda=0 head grads zero={head_zero}, lambda=1 trajectory identical={same}"
    verdict(2, exact and dec_zero and head_zero and same, detail)


def test_criterion_3_masked_loss(rng):
    invariant = True
    for trial in range(20):
        b, n, d = 2, 16, 12
        mask = sample_batch_mask(n, 0.75, b, trial)
        pred = rng.standard_normal((b, n, d))
        target = rng.random((b, n, d))
        base = reconstruction_loss(T.tensor(pred), target, mask).item()
        poked = pred.copy()
        rows = np.arange(b)[:, None]
        fill = [np.nan, np.inf, 1e300, -7.0][trial % 4]
        poked[rows, mask.visible] = fill if trial < 8 else rng.standard_normal((b, mask.visible.shape[1], d)) * 1e6
        again = reconstruction_loss(T.tensor(poked), target, mask).item()
        invariant &= np.float64(base).tobytes() == np.float64(again).tobytes()
    counts = {n: (masked_count(n, 0.75), len(sample_mask(n, 0.75, n).masked)) for n in (4, 16, 49, 64, 196, 256)}
    counts_ok = all(a == b == math.floor(0.75 * n + 0.5) for n, (a, b) in counts.items())
    verdict(3, invariant and counts_ok, f"visible-prediction invariance bit-exact={invariant}, 256 patches -> {counts[256][1]} masked")


def test_criterion_4_spectral():
    lanczos_err = 0.0
    for seed in range(5):
        a = np.random.default_rng(seed).standard_normal((64, 64))
        a = (a + a.T) / 2
        ref = np.linalg.eigvalsh(a)
        s = lanczos_spectrum(lambda v: a @ v, 64, k=5, iterations=64, seed=seed)
        lanczos_err = max(lanczos_err, np.abs(np.array(s.top) - ref[::-1][:5]).max(), np.abs(np.array(s.bottom) - ref[:5]).max())

    micro = MicroMLP()
    dense = dense_hessian(micro.loss_fn, micro.theta)
    directions = np.random.default_rng(7).standard_normal((10, micro.theta.size))
    hvp_err = max(np.abs(hessian_vector_product(micro.loss_fn, micro.theta, v) - dense @ v).max() for v in directions)
    ref_h = micro.jax_hessian()
    dense_vs_jax = np.abs(dense - ref_h).max()
    counts_ok = True
    for seed in range(3):
        m = MicroMLP(seed)
        h = m.jax_hessian()
        s = lanczos_spectrum(lambda v: hessian_vector_product(m.loss_fn, m.theta, v), h.shape[0], iterations=h.shape[0])
        counts_ok &= s.negative_count_exact and s.negative_count == (np.linalg.eigvalsh(h) < 0).sum()
    ok = lanczos_err < 1e-6 and hvp_err < 1e-5 and dense_vs_jax < 1e-5 and counts_ok
    detail = f"Lanczos err {lanczos_err:.1e}, HVP vs dense {hvp_err:.1e}, dense vs autodiff Hessian {dense_vs_jax:.1e}"
    verdict(4, ok, detail + f" ({micro.theta.size} params), negative counts exact={counts_ok}")


def test_criterion_5_diagnostics(trained_tiny, rng):
    dist_err = 0.0
    for _ in range(10):
        x = rng.standard_normal((3, 9, 5))
        brute = np.mean(
            [np.mean([np.linalg.norm(s[i] - s[j]) for i in range(9) for j in range(i + 1, 9)]) for s in x]
        )
        dist_err = max(dist_err, abs(inter_token_distance(x) - brute))
    vit, test = trained_tiny
    with T.no_grad():
        _, out = forward(vit, test.images[:8], record=True)
    n = out.tokens.shape[1]
    col_err = max(np.abs(attention_column_sums(rec).sum(-1) - n).max() for rec in out.attention)
    ok = dist_err < 1e-10 and col_err < 1e-6 and len(out.attention) == vit.config.depth
    verdict(5, ok, f"distance vs brute force {dist_err:.1e}, column sums off by {col_err:.1e} over {len(out.attention)} layers")


def test_criterion_6_trend():
    start = time.perf_counter()
    acc = {"scratch": [], "ssat": []}
    for seed in range(3):
        spec = parse_spec(TREND_SPEC, {"seed": seed})
        train, test = load_datasets(spec)
        enc, dec = spec.encoder_config(train.num_classes), spec.decoder_config()
        for mode in acc:
            m = run_experiment(spec.train_config(mode=mode), train, test, enc, dec, augmentation_for(spec))
            acc[mode].append(m.final_accuracy)
    elapsed = time.perf_counter() - start
    margin = np.mean(acc["ssat"]) - np.mean(acc["scratch"])
    per_seed = ", ".join(f"seed {s}: {a:.3f}/{b:.3f}" for s, (a, b) in enumerate(zip(acc["scratch"], acc["ssat"])))
    detail = f"scratch {np.mean(acc['scratch']):.3f} vs SSAT {np.mean(acc['ssat']):.3f}, margin {100 * margin:+.1f} points"
    verdict(6, margin >= 0.02 and elapsed < 900, detail + f" ({per_seed}), {elapsed:.0f}s")


def test_criterion_7_flops():
    vit_t = EncoderConfig(image_size=224, patch_size=16, channels=3, dim=192, depth=12, heads=3, num_classes=1000)
    dec = DecoderConfig(dim=128, depth=2, heads=16)
    full = estimate_flops(vit_t)
    joint = estimate_flops(vit_t, dec, "ssat")
    ok = abs(full / 1.26e9 - 1) <= 0.10 and abs(joint / 1.67e9 - 1) <= 0.10
    verdict(7, ok, f"ViT-T {full / 1e9:.3f}G (target 1.26G), SSAT {joint / 1e9:.3f}G (target 1.67G)")


def test_criterion_8_determinism(small_data, tmp_path):
    runs = []
    for name in ("a", "b"):
        m, _ = _small_run(small_data, mode="ssat")
        emit_metrics(m, tmp_path / name, "digest")
        runs.append((tmp_path / name / "metrics.csv").read_bytes())
    csv_same = runs[0] == runs[1]

    _, trainer = _small_run(small_data, mode="ssat")
    ckpt = trainer.checkpoint()
    save_checkpoint(tmp_path / "rt.ckpt", ckpt)
    back = load_checkpoint(tmp_path / "rt.ckpt")
    save_checkpoint(tmp_path / "rt2.ckpt", back)
    round_trip = (tmp_path / "rt.ckpt").read_bytes() == (tmp_path / "rt2.ckpt").read_bytes() and all(
        ckpt.params[k].tobytes() == back.params[k].tobytes() and ckpt.params[k].dtype == back.params[k].dtype for k in ckpt.params
    )

    full, tf = _small_run(small_data, mode="ssat")
    _small_run(small_data, {"checkpoint_dir": tmp_path / "split", "stop_after": 1}, mode="ssat")
    resumed, tr = _small_run(small_data, {"resume_from": tmp_path / "split" / "last.ckpt"}, mode="ssat")

    def history(m):
        return [repr(dataclasses.replace(e, wall_time=0.0)) for e in m.epochs]

    resume_same = history(full) == history(resumed) and _param_bytes(tf.vit) == _param_bytes(tr.vit)
    detail = f"metrics CSV byte-identical={csv_same}, checkpoint round trip bit-identical={round_trip}, "
    verdict(8, csv_same and round_trip and resume_same, detail + f"2-epoch resume identical={resume_same}")


def test_criterion_9_perturbed_eval(trained_tiny):
    vit, test = trained_tiny
    clean = evaluate(vit, test)
    zero = evaluate(vit, test, perturb=0.0)
    strong = evaluate(vit, test, perturb=0.5)
    verdict(9, zero == clean and strong <= clean, f"clean {clean:.4f}, strength 0 {zero:.4f}, strength 0.5 {strong:.4f}")
