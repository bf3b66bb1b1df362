"""``ssat-forge`` command line: train, eval, diagnose, compare, flops."""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError, atomic_write_bytes, load_checkpoint
from .config import ExperimentSpec, SpecError, parse_spec
from .data import Dataset, DatasetError, generate_synthetic, load_cifar_binary, load_raw_dir
from .diag import DiagnosticsError, build_report, write_report
from .flops import estimate_flops
from .ssat import SSATModel, init_decoder
from .train import ExperimentMetrics, evaluate, make_augmentation, run_experiment, run_sslft
from .vit import EncoderConfig, init_vit

log = logging.getLogger("ssat_forge")

METRICS_HEADER = ["epoch", "l_cls", "l_ssat", "l_total", "lr", "eval_acc"]
LAMBDA_GRID = (0.9, 0.7, 0.5, 0.3, 0.1)
SUBSET_GRID = (0.1, 0.3, 0.5, 0.7, 1.0)
COMMANDS = ("train", "eval", "diagnose", "compare", "flops")


# ---------------------------------------------------------------------------
# threads


@contextlib.contextmanager
def thread_limit(env=None):
    """Cap BLAS/OpenMP pools at ``SSAT_THREADS`` when it is set."""
    raw = (env if env is not None else os.environ).get("SSAT_THREADS")
    if not raw:
        yield None
        return
    try:
        n = int(raw)
    except ValueError:
        raise SpecError(f"SSAT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise SpecError(f"SSAT_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield n


# ---------------------------------------------------------------------------
# artifacts


def _csv_text(header, rows, spec_digest: str | None) -> bytes:
    buf = io.StringIO()
    if spec_digest:
        buf.write(f"# spec_digest={spec_digest}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue().encode()


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path, header, rows, spec_digest: str | None = None) -> Path:
    path = Path(path)
    atomic_write_bytes(path, _csv_text(header, [[_fmt(v) for v in row] for row in rows], spec_digest))
    return path


def write_json(path, doc: dict) -> Path:
    path = Path(path)
    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n").encode())
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def emit_metrics(metrics: ExperimentMetrics, out_dir, spec_digest: str | None = None, extra: dict | None = None) -> list[Path]:
    """``metrics.csv`` (one row per epoch) and ``summary.json``; both overwritten atomically."""
    out = Path(out_dir)
    rows = [[r.epoch, r.l_cls, r.l_ssat, r.l_total, r.lr, r.eval_acc] for r in metrics.epochs]
    summary = {
        "spec_digest": spec_digest,
        "config_digest": metrics.config_digest,
        "seed": metrics.seed,
        "mode": metrics.mode,
        "epochs": len(metrics.epochs),
        "final_accuracy": metrics.final_accuracy,
        "flops_per_image": metrics.flops_per_image,
        "wall_time": metrics.wall_time,
    }
    summary.update(extra or {})
    return [
        write_csv(out / "metrics.csv", METRICS_HEADER, rows, spec_digest),
        write_json(out / "summary.json", summary),
    ]


# ---------------------------------------------------------------------------
# data and models


def load_datasets(spec: ExperimentSpec) -> tuple[Dataset, Dataset | None]:
    d = spec.data
    if d.source == "synthetic":
        kw = dict(classes=d.classes, image_size=d.image_size, noise=d.noise, tint=d.tint)
        train = generate_synthetic(per_class=d.per_class, seed=d.synthetic_seed, **kw)
        test = generate_synthetic(per_class=d.test_per_class, seed=d.synthetic_seed + 1000, split="test", **kw)
    elif d.source == "raw":
        train = load_raw_dir(d.train_path[0])
        test = load_raw_dir(d.test_path[0], split="test") if d.test_path else None
    else:
        train = load_cifar_binary(d.train_path, d.source)
        test = load_cifar_binary(d.test_path, d.source, split="test") if d.test_path else None
    if d.train_fraction < 1.0:
        train = train.fraction(d.train_fraction, seed=spec.seed)
    e = spec.model.encoder
    if train.image_shape != (e.image_size, e.image_size, e.channels):
        raise DatasetError(f"images are {train.image_shape}, model expects {(e.image_size, e.image_size, e.channels)}")
    return train, test


def augmentation_for(spec: ExperimentSpec):
    a = spec.data.augment
    return make_augmentation(
        spec.model.encoder.image_size,
        spec.seed,
        enabled=a.enabled,
        crop_scale=tuple(a.crop_scale),
        erase_p=a.erase_p,
        rand_n=a.rand_n,
    )


def model_from_checkpoint(ckpt: Checkpoint, precision: int = 32):
    """Rebuild the model a checkpoint was written from (with decoder when present)."""
    from .ssat import DecoderConfig

    enc = EncoderConfig(**ckpt.config["encoder"])
    rng = np.random.default_rng(0)
    with T.precision(precision):
        vit = init_vit(enc, rng)
        model = vit
        dec_cfg = ckpt.config.get("decoder")
        if dec_cfg and any(name.startswith("decoder.") for name in ckpt.params):
            dcfg = DecoderConfig(**dec_cfg)
            grid = enc.grid
            model = SSATModel(vit, dcfg, init_decoder(dcfg, enc.dim, grid.num_patches, grid.patch_dim, rng))
        for name, t in model.named_parameters():
            if name not in ckpt.params:
                raise CheckpointError(f"checkpoint lacks tensor {name}")
            if ckpt.params[name].shape != t.shape:
                raise CheckpointError(f"tensor {name}: shape {ckpt.params[name].shape}, expected {t.shape}")
            t.data = ckpt.params[name].astype(T.get_dtype())
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_train(spec: ExperimentSpec, args) -> dict:
    train, test = load_datasets(spec)
    out = Path(spec.output)
    cfg = spec.train_config()
    init_from = args.init or spec.train.init_from
    metrics = run_experiment(
        cfg,
        train,
        test,
        spec.encoder_config(train.num_classes),
        spec.decoder_config(),
        augmentation_for(spec),
        init_from=init_from,
        checkpoint_dir=out / "checkpoints",
        resume_from=args.resume,
    )
    emit_metrics(metrics, out, spec.digest)
    print(f"{cfg.mode}: final accuracy {metrics.final_accuracy:.4f} after {len(metrics.epochs)} epochs -> {out}")
    return {"accuracy": metrics.final_accuracy}


def _checkpoint_path(spec: ExperimentSpec, args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(spec.output) / "checkpoints" / "last.ckpt"


def cmd_eval(spec: ExperimentSpec, args) -> dict:
    _, test = load_datasets(spec)
    if test is None:
        raise DatasetError("eval needs a test split (data.test_path)")
    path = _checkpoint_path(spec, args)
    model = model_from_checkpoint(load_checkpoint(path))
    vit = model.vit if isinstance(model, SSATModel) else model
    acc = evaluate(vit, test, perturb=args.perturb, seed=spec.seed)
    doc = {
        "spec_digest": spec.digest,
        "checkpoint": str(path),
        "perturb": args.perturb,
        "accuracy": acc,
        "samples": len(test),
    }
    name = "eval.json" if args.perturb is None else f"eval_perturb_{args.perturb:g}.json"
    write_json(Path(spec.output) / name, doc)
    print(f"accuracy {acc:.4f}" + ("" if args.perturb is None else f" (perspective strength {args.perturb:g})"))
    return doc


def cmd_diagnose(spec: ExperimentSpec, args) -> dict:
    train, test = load_datasets(spec)
    data = test if test is not None else train
    path = _checkpoint_path(spec, args)
    if path.exists():
        model = model_from_checkpoint(load_checkpoint(path))
    else:
        if args.checkpoint:
            raise FileNotFoundError(f"checkpoint {path} not found")
        log.warning("no checkpoint at %s; diagnosing a freshly initialised model", path)
        model = init_vit(spec.encoder_config(data.num_classes), np.random.default_rng(spec.seed))
    report = build_report(model, data.images, data.labels, spec.diagnostics_config())
    written = write_report(report, Path(spec.output) / "diagnostics", spec.digest)
    print(f"diagnostics for {report.depth} layers -> {written[0].parent}")
    return report.to_dict()


def _regime_row(name: str, epochs: int, metrics: ExperimentMetrics, wall: float) -> list:
    return [name, epochs, metrics.final_accuracy, metrics.flops_per_image, round(wall, 3)]


def compare_regimes(spec: ExperimentSpec, train: Dataset, test: Dataset | None) -> list[list]:
    """Scratch, SSL+FT and SSAT with the same seed, data order and augmentation draws."""
    enc, dec = spec.encoder_config(train.num_classes), spec.decoder_config()
    rows = []
    for mode in ("scratch", "ssat"):
        start = time.perf_counter()
        m = run_experiment(spec.train_config(mode=mode), train, test, enc, dec, augmentation_for(spec))
        rows.append(_regime_row(mode, spec.train.epochs, m, time.perf_counter() - start))
    start = time.perf_counter()
    protocol = spec.train.sslft_protocol
    pre, ft = run_sslft(protocol, spec.train.epochs, spec.train_config(), train, test, enc, dec, augmentation_for(spec))
    wall = time.perf_counter() - start
    row = _regime_row(protocol, len(pre.epochs) + len(ft.epochs), ft, wall)
    row[3] = pre.flops_per_image * len(pre.epochs) / row[1] + ft.flops_per_image * len(ft.epochs) / row[1]
    rows.insert(1, row)
    return rows


def cmd_compare(spec: ExperimentSpec, args) -> dict:
    train, test = load_datasets(spec)
    out = Path(spec.output)
    if args.sweep == "lambda":
        rows = []
        enc, dec = spec.encoder_config(train.num_classes), spec.decoder_config()
        for lam in LAMBDA_GRID:
            m = run_experiment(spec.train_config(mode="ssat", lam=lam), train, test, enc, dec, augmentation_for(spec))
            rows.append([lam, spec.seed, m.final_accuracy])
            print(f"lambda {lam:g}: accuracy {m.final_accuracy:.4f}")
        write_csv(out / "lambda_sweep.csv", ["lambda", "seed", "accuracy"], rows, spec.digest)
        return {"rows": rows}
    if args.sweep == "subset":
        rows = []
        enc, dec = spec.encoder_config(train.num_classes), spec.decoder_config()
        for frac in SUBSET_GRID:
            part = train.fraction(frac, seed=spec.seed) if frac < 1.0 else train
            for mode in ("scratch", "ssat"):
                m = run_experiment(spec.train_config(mode=mode), part, test, enc, dec, augmentation_for(spec))
                rows.append([frac, mode, len(part), m.final_accuracy])
                print(f"subset {frac:g} {mode}: accuracy {m.final_accuracy:.4f}")
        write_csv(out / "subset_sweep.csv", ["fraction", "regime", "train_size", "accuracy"], rows, spec.digest)
        return {"rows": rows}
    rows = compare_regimes(spec, train, test)
    header = ["regime", "epochs", "accuracy", "flops_per_image", "wall_time"]
    write_csv(out / "compare.csv", header, rows, spec.digest)
    width = max(len(r[0]) for r in rows)
    print(f"{'regime':<{width}}  epochs  accuracy  GFLOPs/img  wall s")
    for r in rows:
        print(f"{r[0]:<{width}}  {r[1]:>6}  {r[2]:>8.4f}  {r[3] / 1e9:>10.4f}  {r[4]:>6.1f}")
    return {"rows": rows}


def cmd_flops(spec: ExperimentSpec, args) -> dict:
    enc, dec = spec.encoder_config(), spec.decoder_config()
    ratio = spec.train.mask_ratio
    doc = {}
    for mode in ("scratch", "ssat", "ssl_pretrain"):
        macs = estimate_flops(enc, dec, mode, ratio, convention="mac")
        doc[mode] = {"mac": macs, "flop": estimate_flops(enc, dec, mode, ratio, convention="flop")}
        print(f"{mode:<13} {macs / 1e9:.4f} GMACs  ({2 * macs / 1e9:.4f} GFLOPs counting mul and add)")
    return doc


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "diagnose": cmd_diagnose, "compare": cmd_compare, "flops": cmd_flops}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssat-forge", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="TOML or JSON experiment spec")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--lambda", dest="lam", type=float, help="classification weight in the joint loss")
    parser.add_argument("--mask-ratio", type=float)
    parser.add_argument("--mode", choices=("scratch", "ssl_pretrain", "finetune", "ssat"))
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--perturb", type=float, help="perspective strength for eval")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--checkpoint", help="checkpoint for eval/diagnose")
    parser.add_argument("--init", help="pretrained checkpoint for finetune")
    parser.add_argument("--resume", help="resume training from this checkpoint")
    parser.add_argument("--sweep", choices=("lambda", "subset"), help="compare: run an ablation sweep")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.perturb is not None and not 0.0 <= args.perturb <= 1.0:
            raise SpecError("--perturb must be in [0, 1]")
        overrides = {k: getattr(args, k) for k in ("seed", "lam", "mask_ratio", "mode", "epochs", "out")}
        spec = parse_spec(args.config, overrides)
        with thread_limit():
            HANDLERS[args.command](spec, args)
    except (SpecError, CheckpointError, DatasetError, DiagnosticsError, ValueError, OSError) as exc:
        print(f"ssat-forge {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def entry() -> None:
    sys.exit(main())
