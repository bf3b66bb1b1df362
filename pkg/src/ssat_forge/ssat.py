"""Masked-patch reconstruction as an auxiliary task next to classification.

The encoder is shared.  One branch sees every patch of the augmented image and
feeds the classifier; the other sees only the unmasked patches and feeds a
shallow decoder that predicts the pixels of the hidden ones.  The two losses
are mixed convexly:

    total = lam * l_cls + (1 - lam) * l_ssat
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .layers import (
    BlockParams,
    LayerNormParams,
    LinearParams,
    init_block,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
    named_parameters,
    transformer_block,
    trunc_normal,
)
from .tensor import Tensor, concat, constant, get_dtype, parameter
from .vit import VisionTransformer, classify, cross_entropy, embed, encode, patchify

PATCH_NORM_EPS = 1e-6


class EmptyMaskWarning(UserWarning):
    """Reconstruction loss requested with no masked patches; defined as 0."""


def masked_count(num_patches: int, ratio: float) -> int:
    """``round(ratio * N)`` with halves rounded away from zero."""
    return int(math.floor(ratio * num_patches + 0.5))


@dataclass(frozen=True)
class MaskSpec:
    num_patches: int
    ratio: float
    visible: np.ndarray  # sorted
    masked: np.ndarray  # sorted
    seed: object = None


def sample_mask(num_patches: int, ratio: float, seed) -> MaskSpec:
    """Uniformly choose ``round(ratio * N)`` patches to hide, reproducibly from ``seed``."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    if num_patches < 1:
        raise ValueError("need at least one patch")
    k = masked_count(num_patches, ratio)
    order = np.random.default_rng(seed).permutation(num_patches)
    masked = np.sort(order[:k])
    visible = np.sort(order[k:])
    return MaskSpec(num_patches, ratio, visible, masked, seed)


@dataclass(frozen=True)
class BatchMask:
    """Per-sample masks stacked for a batch; every row hides the same count."""

    visible: np.ndarray  # (B, N_visible)
    masked: np.ndarray  # (B, N_masked)

    @property
    def num_patches(self) -> int:
        return self.visible.shape[1] + self.masked.shape[1]

    @property
    def restore(self) -> np.ndarray:
        """Index into ``[visible..., masked...]`` that puts tokens back in patch order."""
        return np.argsort(np.concatenate([self.visible, self.masked], axis=1), axis=1, kind="stable")

    @classmethod
    def stack(cls, masks) -> "BatchMask":
        masks = list(masks)
        return cls(np.stack([m.visible for m in masks]), np.stack([m.masked for m in masks]))


def sample_batch_mask(num_patches: int, ratio: float, batch: int, seed) -> BatchMask:
    base = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    return BatchMask.stack(sample_mask(num_patches, ratio, base + [i]) for i in range(batch))


def _as_batch(mask, batch: int) -> BatchMask:
    if isinstance(mask, BatchMask):
        return mask
    return BatchMask(np.tile(mask.visible, (batch, 1)), np.tile(mask.masked, (batch, 1)))


def apply_mask(tokens: Tensor, mask, has_class_token: bool = True) -> Tensor:
    """Keep the visible patch tokens in their original order (class token first)."""
    b, n, _ = tokens.shape
    mask = _as_batch(mask, b)
    if n - int(has_class_token) != mask.num_patches:
        raise ValueError(f"apply_mask: {n - int(has_class_token)} patch tokens but mask covers {mask.num_patches}")
    idx = mask.visible + int(has_class_token)
    if has_class_token:
        idx = np.concatenate([np.zeros((b, 1), dtype=idx.dtype), idx], axis=1)
    return tokens.index_select(idx, axis=1)


# ---------------------------------------------------------------------------
# decoder


@dataclass(frozen=True)
class DecoderConfig:
    dim: int = 128
    depth: int = 2
    heads: int = 16
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"decoder dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class DecoderParams:
    embed: LinearParams  # encoder dim -> decoder dim
    mask_token: Tensor
    pos_embed: Tensor  # (N, decoder dim)
    blocks: list[BlockParams]
    norm: LayerNormParams
    pred: LinearParams  # decoder dim -> pixels per patch


def init_decoder(
    config: DecoderConfig, encoder_dim: int, num_patches: int, patch_dim: int, rng: np.random.Generator
) -> DecoderParams:
    return DecoderParams(
        embed=init_linear(encoder_dim, config.dim, rng),
        mask_token=parameter(rng.standard_normal(config.dim) * 0.02),
        pos_embed=parameter(trunc_normal(rng, (num_patches, config.dim))),
        blocks=[init_block(config.dim, config.heads, rng, config.mlp_ratio) for _ in range(config.depth)],
        norm=init_layer_norm(config.dim),
        pred=init_linear(config.dim, patch_dim, rng),
    )


def decode(params: DecoderParams, latent_visible: Tensor, mask, has_class_token: bool = True) -> Tensor:
    """Predict pixels for all ``N`` patches, shape ``(B, N, patch_dim)``.

    The class token, if present, is dropped before decoding; it is not a patch.
    """
    b = latent_visible.shape[0]
    mask = _as_batch(mask, b)
    n_vis = mask.visible.shape[1]
    if latent_visible.shape[1] != n_vis + int(has_class_token):
        raise ValueError(f"decode: got {latent_visible.shape[1]} latents for {n_vis} visible patches")
    if latent_visible.shape[-1] != params.embed.in_dim:
        raise ValueError(f"decode: latent dim {latent_visible.shape[-1]} != {params.embed.in_dim}")
    if has_class_token:
        latent_visible = latent_visible.index_select(np.arange(1, n_vis + 1), axis=1)
    x = linear(params.embed, latent_visible)
    n_mask = mask.masked.shape[1]
    if n_mask:
        fill = params.mask_token + constant(np.zeros((b, n_mask, x.shape[-1]), dtype=get_dtype()))
        x = concat([x, fill], axis=1)
        x = x.index_select(mask.restore, axis=1)
    x = x + params.pos_embed
    for block in params.blocks:
        x, _ = transformer_block(block, x)
    x = layer_norm(x, params.norm.gamma, params.norm.beta)
    return linear(params.pred, x)


# ---------------------------------------------------------------------------
# losses


def normalize_patches(target: np.ndarray, eps: float = PATCH_NORM_EPS) -> np.ndarray:
    """Per-patch standardisation: ``(t - mean) / sqrt(var + eps)`` over the pixels."""
    mean = target.mean(axis=-1, keepdims=True)
    var = target.var(axis=-1, keepdims=True)
    return (target - mean) / np.sqrt(var + eps)


def reconstruction_loss(pred: Tensor, target: np.ndarray, mask, eps: float = PATCH_NORM_EPS) -> Tensor:
    """Mean squared error against normalised targets, over masked patches only.

    Predictions at visible patches are never read.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"reconstruction_loss: pred {pred.shape} vs target {target.shape}")
    if pred.ndim == 2:
        pred = pred.reshape(1, *pred.shape)
        target = target[None]
    b = pred.shape[0]
    mask = _as_batch(mask, b)
    if mask.masked.shape[1] == 0:
        warnings.warn("no masked patches; reconstruction loss is 0", EmptyMaskWarning, stacklevel=2)
        return constant(np.zeros((), dtype=get_dtype()))
    rows = np.arange(b)[:, None]
    goal = normalize_patches(target, eps)[rows, mask.masked].astype(get_dtype())
    diff = pred.index_select(mask.masked, axis=1) - constant(goal)
    return (diff * diff).mean()


@dataclass
class LossBreakdown:
    l_cls: Tensor
    l_ssat: Tensor
    lam: float
    total: Tensor

    def values(self) -> dict[str, float]:
        return {"l_cls": self.l_cls.item(), "l_ssat": self.l_ssat.item(), "lambda": self.lam, "l_total": self.total.item()}


def joint_loss(l_cls, l_ssat, lam: float) -> LossBreakdown:
    """``lam * l_cls + (1 - lam) * l_ssat``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    l_cls = l_cls if isinstance(l_cls, Tensor) else constant(np.asarray(l_cls, dtype=get_dtype()))
    l_ssat = l_ssat if isinstance(l_ssat, Tensor) else constant(np.asarray(l_ssat, dtype=get_dtype()))
    total = l_cls * float(lam) + l_ssat * float(1.0 - lam)
    return LossBreakdown(l_cls, l_ssat, float(lam), total)


@dataclass
class SSATModel:
    """A classifier plus the auxiliary decoder (the decoder is unused at inference)."""

    vit: VisionTransformer
    decoder_config: DecoderConfig
    decoder: DecoderParams

    def named_parameters(self):
        yield from self.vit.named_parameters()
        yield from named_parameters(self.decoder, "decoder")


def init_ssat(vit: VisionTransformer, config: DecoderConfig, rng: np.random.Generator) -> SSATModel:
    grid = vit.config.grid
    return SSATModel(vit, config, init_decoder(config, vit.config.dim, grid.num_patches, grid.patch_dim, rng))


def classification_branch(vit: VisionTransformer, images, targets, smoothing: float = 0.0, rng=None) -> Tensor:
    cfg = vit.config
    tokens = embed(vit.encoder, patchify(np.asarray(images), cfg.grid))
    latent = encode(cfg, vit.encoder, tokens, rng=rng).tokens
    return cross_entropy(classify(vit.head, latent, cfg.use_class_token), targets, smoothing)


def reconstruction_branch(model: SSATModel, images, mask: BatchMask, rng=None) -> Tensor:
    cfg = model.vit.config
    patches = patchify(np.asarray(images), cfg.grid)
    tokens = apply_mask(embed(model.vit.encoder, patches), mask, cfg.use_class_token)
    latent = encode(cfg, model.vit.encoder, tokens, rng=rng).tokens
    pred = decode(model.decoder, latent, mask, cfg.use_class_token)
    return reconstruction_loss(pred, patches, mask)


def ssat_step_forward(
    model: SSATModel,
    images: np.ndarray,
    targets,
    mask_ratio: float,
    lam: float,
    mask_seed=0,
    smoothing: float = 0.0,
    cls_images: np.ndarray | None = None,
    rng_cls: np.random.Generator | None = None,
    rng_rec: np.random.Generator | None = None,
) -> LossBreakdown:
    """Both branches through the shared encoder, combined by :func:`joint_loss`.

    ``images`` is the augmented batch ``A(X)`` and is also the reconstruction
    target.  ``cls_images`` (e.g. after mixup) replaces it for the classifier.
    """
    images = np.asarray(images)
    cls_images = images if cls_images is None else cls_images
    l_cls = classification_branch(model.vit, cls_images, targets, smoothing, rng_cls)
    mask = sample_batch_mask(model.vit.config.grid.num_patches, mask_ratio, images.shape[0], mask_seed)
    l_ssat = reconstruction_branch(model, images, mask, rng_rec)
    return joint_loss(l_cls, l_ssat, lam)
