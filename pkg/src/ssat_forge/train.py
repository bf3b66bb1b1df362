"""Training regimes: scratch, masked-reconstruction pretraining, fine-tuning, joint.

All randomness is derived from ``(seed, stream, epoch, batch)`` rather than a
running generator, so a run resumed from a checkpoint replays exactly the same
draws as an uninterrupted one, and two regimes with the same seed see the same
data order, augmentations and masks.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AugmentationPipeline, default_pipeline, mixup, perturb_dataset_images
from .checkpoint import Checkpoint, config_digest, load_checkpoint, save_checkpoint
from .data import Dataset
from .flops import estimate_flops
from .optim import AdamW, build_groups, lr_schedule
from .ssat import (
    DecoderConfig,
    LossBreakdown,
    SSATModel,
    classification_branch,
    init_decoder,
    joint_loss,
    reconstruction_branch,
    sample_batch_mask,
)
from .tensor import backward, no_grad
from .vit import EncoderConfig, VisionTransformer, forward, init_head, init_vit

log = logging.getLogger(__name__)

MODES = ("scratch", "ssl_pretrain", "finetune", "ssat")

# stream tags for derived generators
_SHUFFLE, _MIXUP, _MASK, _DROP_CLS, _DROP_REC, _INIT_VIT, _INIT_DEC, _INIT_HEAD = range(1, 9)

# SSL epochs, fine-tune epochs as fractions of the reference schedule length
SSLFT_PROTOCOLS = {
    "sslft-1": (0.5, 0.5),
    "sslft-2": (0.5, 1.0),
    "sslft-3": (1.0, 0.5),
    "sslft-4": (1.0, 1.0),
}


class LabelAccessError(RuntimeError):
    pass


class UnlabeledView:
    """A dataset wrapper that refuses to hand out labels."""

    def __init__(self, dataset: Dataset):
        self._dataset = dataset
        self.images = dataset.images
        self.num_classes = dataset.num_classes

    def __len__(self) -> int:
        return len(self.images)

    @property
    def labels(self):
        raise LabelAccessError("labels are not available during self-supervised pretraining")


@dataclass
class TrainConfig:
    mode: str = "ssat"
    epochs: int = 100
    warmup_epochs: int = 5
    base_lr: float = 1e-3
    warmup_lr: float = 1e-6
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    opt_eps: float = 1e-8
    layer_decay: float = 0.75
    lam: float = 0.1
    mask_ratio: float = 0.75
    batch_size: int = 64
    seed: int = 0
    label_smoothing: float = 0.1
    mixup: bool = True
    mixup_alpha: float = 0.8
    drop_path: float = 0.01
    precision: int = 32
    eval_every: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.epochs >= self.warmup_epochs >= 0:
            raise ValueError("need epochs >= warmup_epochs >= 0")
        if min(self.base_lr, self.warmup_lr, self.min_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask ratio must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


@dataclass
class EpochRecord:
    epoch: int
    l_cls: float
    l_ssat: float
    l_total: float
    lr: float
    eval_acc: float
    wall_time: float = 0.0


@dataclass
class ExperimentMetrics:
    mode: str
    seed: int
    config_digest: str
    flops_per_image: int
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        accs = [e.eval_acc for e in self.epochs if not math.isnan(e.eval_acc)]
        return accs[-1] if accs else float("nan")

    @property
    def wall_time(self) -> float:
        return sum(e.wall_time for e in self.epochs)


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    return np.eye(k)[labels]


class Trainer:
    """Owns the model, the optimizer and the step loop for one regime."""

    def __init__(
        self,
        config: TrainConfig,
        encoder: EncoderConfig,
        decoder: DecoderConfig | None = None,
        augmentation: AugmentationPipeline | None = None,
        init_from: Checkpoint | None = None,
    ):
        self.config = config
        if config.drop_path != encoder.drop_path:
            encoder = dataclasses.replace(encoder, drop_path=config.drop_path)
        self.encoder_config = encoder
        self.needs_decoder = config.mode in ("ssat", "ssl_pretrain")
        if self.needs_decoder and decoder is None:
            raise ValueError(f"mode {config.mode!r} needs a decoder config")
        self.decoder_config = decoder if self.needs_decoder else None
        self.augmentation = augmentation if augmentation is not None else AugmentationPipeline([], config.seed)
        self.epoch = 0
        self.history: list[EpochRecord] = []
        with T.precision(config.precision):
            self.vit = init_vit(encoder, _rng(config.seed, _INIT_VIT))
            self.model = None
            if self.needs_decoder:
                grid = encoder.grid
                dec = init_decoder(decoder, encoder.dim, grid.num_patches, grid.patch_dim, _rng(config.seed, _INIT_DEC))
                self.model = SSATModel(self.vit, decoder, dec)
            if config.mode == "finetune":
                if init_from is None:
                    raise FileNotFoundError("finetune mode needs a pretrained checkpoint")
                self._load_encoder(init_from)
                self.vit.head = init_head(encoder.dim, encoder.num_classes, _rng(config.seed, _INIT_HEAD))
        self.named_params = list(self.model.named_parameters() if self.model else self.vit.named_parameters())
        groups = build_groups(self.named_params, encoder.depth, config.layer_decay)
        self.optimizer = AdamW(groups, config.weight_decay, config.betas, config.opt_eps)

    # -- bookkeeping
    def describe(self) -> dict:
        return {
            "encoder": dataclasses.asdict(self.encoder_config),
            "decoder": dataclasses.asdict(self.decoder_config) if self.decoder_config else None,
            "train": dataclasses.asdict(self.config),
        }

    @property
    def digest(self) -> str:
        return config_digest(self.describe()).hex()

    def _load_encoder(self, ckpt: Checkpoint) -> None:
        found = 0
        for name, t in self.vit.named_parameters():
            if name.startswith("encoder.") and name in ckpt.params:
                if ckpt.params[name].shape != t.shape:
                    raise ValueError(f"checkpoint tensor {name} has shape {ckpt.params[name].shape}, expected {t.shape}")
                t.data[...] = ckpt.params[name]
                found += 1
        if not found:
            raise ValueError("checkpoint holds no encoder parameters")

    def steps_per_epoch(self, n: int) -> int:
        b = self.config.batch_size
        return max(1, n // b) if n >= b else 1

    # -- one epoch
    def train_epoch(self, data) -> EpochRecord:
        cfg = self.config
        e = self.epoch
        start = time.perf_counter()
        n = len(data)
        steps = self.steps_per_epoch(n)
        total = steps * cfg.epochs
        warm = steps * cfg.warmup_epochs
        order = _rng(cfg.seed, _SHUFFLE, e).permutation(n)
        b = min(cfg.batch_size, n)
        sums = {"l_cls": 0.0, "l_ssat": 0.0, "l_total": 0.0}
        lr = cfg.base_lr
        with T.precision(cfg.precision):
            dtype = T.get_dtype()
            for s in range(steps):
                idx = order[s * b : (s + 1) * b]
                images = self.augmentation.batch(data.images[idx], e, idx).astype(dtype)
                lr = lr_schedule(e * steps + s, total, warm, cfg.base_lr, cfg.warmup_lr, cfg.min_lr)
                T.reset_tape()
                parts = self._losses(data, idx, images, e, s)
                grads = backward(parts.total)
                self.optimizer.step(grads, lr)
                T.reset_tape()
                for key, value in parts.values().items():
                    if key in sums:
                        sums[key] += value
        rec = EpochRecord(
            epoch=e + 1,
            l_cls=sums["l_cls"] / steps if cfg.mode != "ssl_pretrain" else float("nan"),
            l_ssat=sums["l_ssat"] / steps if self.needs_decoder else float("nan"),
            l_total=sums["l_total"] / steps,
            lr=lr,
            eval_acc=float("nan"),
            wall_time=time.perf_counter() - start,
        )
        self.epoch += 1
        return rec

    def _losses(self, data, idx, images, e, s):
        cfg = self.config
        grid = self.encoder_config.grid
        nan = T.constant(np.array(np.nan, dtype=T.get_dtype()))
        if cfg.mode == "ssl_pretrain":
            mask = sample_batch_mask(grid.num_patches, cfg.mask_ratio, len(idx), [cfg.seed, _MASK, e, s])
            l_ssat = reconstruction_branch(self.model, images, mask, _rng(cfg.seed, _DROP_REC, e, s))
            return _only(l_ssat, "ssat", nan)
        k = self.encoder_config.num_classes
        targets = _one_hot(data.labels[idx], k)
        cls_images = images
        if cfg.mixup and len(idx) >= 2:
            cls_images, targets, _, _ = mixup(images, targets, cfg.mixup_alpha, _rng(cfg.seed, _MIXUP, e, s))
        l_cls = classification_branch(
            self.vit, cls_images, targets, cfg.label_smoothing, _rng(cfg.seed, _DROP_CLS, e, s)
        )
        if cfg.mode in ("scratch", "finetune"):
            return _only(l_cls, "cls", nan)
        mask = sample_batch_mask(grid.num_patches, cfg.mask_ratio, len(idx), [cfg.seed, _MASK, e, s])
        l_ssat = reconstruction_branch(self.model, images, mask, _rng(cfg.seed, _DROP_REC, e, s))
        return joint_loss(l_cls, l_ssat, cfg.lam)

    # -- evaluation
    def evaluate(self, data: Dataset, perturb: float | None = None, batch_size: int = 100, seed: int = 0) -> float:
        if self.config.mode == "ssl_pretrain":
            return float("nan")
        return evaluate(self.vit, data, perturb, batch_size, seed, self.config.precision)

    # -- persistence
    def checkpoint(self) -> Checkpoint:
        st = self.optimizer.state
        return Checkpoint(
            config=self.describe(),
            params={name: t.data for name, t in self.named_params},
            optimizer_step=st.step,
            exp_avg=dict(st.exp_avg),
            exp_avg_sq=dict(st.exp_avg_sq),
            epoch=self.epoch,
            rng_state={"scheme": "derived", "seed": self.config.seed, "next_epoch": self.epoch},
            extra={"history": [dataclasses.asdict(r) for r in self.history]},
        )

    def restore(self, ckpt: Checkpoint) -> None:
        if config_digest(ckpt.config) != config_digest(self.describe()):
            raise ValueError("checkpoint was written by a different configuration")
        for name, t in self.named_params:
            t.data[...] = ckpt.params[name]
        st = self.optimizer.state
        st.step = ckpt.optimizer_step
        for name in st.exp_avg:
            st.exp_avg[name][...] = ckpt.exp_avg[name]
            st.exp_avg_sq[name][...] = ckpt.exp_avg_sq[name]
        self.epoch = ckpt.epoch
        self.history = [EpochRecord(**r) for r in ckpt.extra.get("history", [])]


def _only(loss, kind: str, nan) -> LossBreakdown:
    """Single-objective regimes report the unused loss as NaN."""
    if kind == "cls":
        return LossBreakdown(loss, nan, 1.0, loss)
    return LossBreakdown(nan, loss, 0.0, loss)


def evaluate(
    vit: VisionTransformer,
    data: Dataset,
    perturb: float | None = None,
    batch_size: int = 100,
    seed: int = 0,
    precision: int = 32,
) -> float:
    """Top-1 accuracy; ``perturb`` applies random perspective warps of that strength."""
    images = data.images
    if perturb is not None:
        images = perturb_dataset_images(images, perturb, seed)
    correct = 0
    with T.precision(precision), no_grad():
        for i in range(0, len(images), batch_size):
            logits, _ = forward(vit, images[i : i + batch_size].astype(T.get_dtype()))
            correct += int((logits.data.argmax(axis=-1) == data.labels[i : i + batch_size]).sum())
    return correct / max(1, len(images))


def run_experiment(
    config: TrainConfig,
    train_set: Dataset,
    test_set: Dataset | None,
    encoder: EncoderConfig,
    decoder: DecoderConfig | None = None,
    augmentation: AugmentationPipeline | None = None,
    init_from: Checkpoint | str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    resume_from: Checkpoint | str | Path | None = None,
    stop_after: int | None = None,
    trainer_out: list | None = None,
) -> ExperimentMetrics:
    """Train one regime and return per-epoch metrics.

    ``stop_after`` ends the run early (after that many total epochs) while
    keeping the full-length schedule, which is how a run is split for resume.
    """
    if isinstance(init_from, (str, Path)):
        init_from = load_checkpoint(init_from)
    if isinstance(resume_from, (str, Path)):
        resume_from = load_checkpoint(resume_from)
    encoder = dataclasses.replace(encoder, num_classes=train_set.num_classes)
    trainer = Trainer(config, encoder, decoder, augmentation, init_from)
    if resume_from is not None:
        trainer.restore(resume_from)
    data = UnlabeledView(train_set) if config.mode == "ssl_pretrain" else train_set
    metrics = ExperimentMetrics(
        mode=config.mode,
        seed=config.seed,
        config_digest=trainer.digest,
        flops_per_image=estimate_flops(trainer.encoder_config, decoder, _flops_mode(config.mode), config.mask_ratio),
        epochs=list(trainer.history),
    )
    last = config.epochs if stop_after is None else min(stop_after, config.epochs)
    while trainer.epoch < last:
        rec = trainer.train_epoch(data)
        due = rec.epoch % config.eval_every == 0 or rec.epoch == config.epochs
        if test_set is not None and due:
            rec.eval_acc = trainer.evaluate(test_set)
        trainer.history.append(rec)
        metrics.epochs.append(rec)
        log.info("epoch %d %s loss %.4f acc %.4f", rec.epoch, config.mode, rec.l_total, rec.eval_acc)
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / "last.ckpt", trainer.checkpoint())
    if trainer_out is not None:
        trainer_out.append(trainer)
    return metrics


def _flops_mode(mode: str) -> str:
    return "scratch" if mode == "finetune" else mode


def run_sslft(
    protocol: str,
    reference_epochs: int,
    config: TrainConfig,
    train_set: Dataset,
    test_set: Dataset | None,
    encoder: EncoderConfig,
    decoder: DecoderConfig,
    augmentation: AugmentationPipeline | None = None,
    workdir: str | Path | None = None,
) -> tuple[ExperimentMetrics, ExperimentMetrics]:
    """Reconstruction pretraining, then classification fine-tuning from its encoder."""
    ssl_frac, ft_frac = SSLFT_PROTOCOLS[protocol]
    ssl_epochs = max(1, int(round(ssl_frac * reference_epochs)))
    ft_epochs = max(1, int(round(ft_frac * reference_epochs)))
    warm = min(config.warmup_epochs, ssl_epochs, ft_epochs)
    pre_cfg = dataclasses.replace(config, mode="ssl_pretrain", epochs=ssl_epochs, warmup_epochs=warm)
    holder: list[Trainer] = []
    pre = run_experiment(pre_cfg, train_set, None, encoder, decoder, augmentation, trainer_out=holder)
    ckpt = holder[0].checkpoint()
    if workdir is not None:
        save_checkpoint(Path(workdir) / f"{protocol}-pretrain.ckpt", ckpt)
    ft_cfg = dataclasses.replace(config, mode="finetune", epochs=ft_epochs, warmup_epochs=warm)
    ft = run_experiment(ft_cfg, train_set, test_set, encoder, None, augmentation, init_from=ckpt)
    return pre, ft


def make_augmentation(image_size: int, seed: int, enabled: bool = True, **kwargs) -> AugmentationPipeline:
    return default_pipeline(image_size, seed, **kwargs) if enabled else AugmentationPipeline([], seed)
