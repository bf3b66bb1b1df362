"""Patch tokenization, the ViT encoder, classifier head and classification loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (
    AttentionRecord,
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
from .tensor import Tensor, apply, concat, constant, get_dtype, parameter


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    channels: int
    patch_size: int

    def __post_init__(self):
        p = self.patch_size
        if p <= 0 or self.height % p or self.width % p:
            raise ValueError(f"patch size {p} does not divide image {self.height}x{self.width}")

    @property
    def rows(self) -> int:
        return self.height // self.patch_size

    @property
    def cols(self) -> int:
        return self.width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def patchify(images: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """``(B, H, W, C)`` (or a single ``(H, W, C)``) to ``(B, N, P*P*C)``, row-major patches."""
    single = images.ndim == 3
    if single:
        images = images[None]
    b, hgt, wid, c = images.shape
    if (hgt, wid, c) != (grid.height, grid.width, grid.channels):
        PatchGrid(hgt, wid, c, grid.patch_size)  # raises on divisibility
        raise ValueError(f"image shape {(hgt, wid, c)} does not match grid {grid}")
    p = grid.patch_size
    x = images.reshape(b, grid.rows, p, grid.cols, p, c).transpose(0, 1, 3, 2, 4, 5)
    out = x.reshape(b, grid.num_patches, grid.patch_dim)
    return out[0] if single else out


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    b = patches.shape[0]
    p, c = grid.patch_size, grid.channels
    x = patches.reshape(b, grid.rows, grid.cols, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    out = x.reshape(b, grid.height, grid.width, c)
    return out[0] if single else out


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    dim: int = 64
    depth: int = 4
    heads: int = 4
    num_classes: int = 10
    mlp_ratio: float = 4.0
    use_class_token: bool = True
    drop_path: float = 0.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 0 or self.num_classes < 1:
            raise ValueError("depth must be >= 0 and num_classes >= 1")
        self.grid  # validates divisibility

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image_size, self.image_size, self.channels, self.patch_size)

    @property
    def num_tokens(self) -> int:
        return self.grid.num_patches + int(self.use_class_token)


@dataclass
class EncoderParams:
    patch_embed: LinearParams
    pos_embed: Tensor  # (num_tokens, dim); row 0 belongs to the class token when present
    cls_token: Tensor | None
    blocks: list[BlockParams]


@dataclass
class ClassifierHead:
    norm: LayerNormParams
    fc: LinearParams


@dataclass
class VisionTransformer:
    config: EncoderConfig
    encoder: EncoderParams
    head: ClassifierHead

    def named_parameters(self):
        yield from named_parameters(self.encoder, "encoder")
        yield from named_parameters(self.head, "head")


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    grid = config.grid
    return EncoderParams(
        patch_embed=init_linear(grid.patch_dim, config.dim, rng),
        pos_embed=parameter(rng.standard_normal((config.num_tokens, config.dim)) * 0.02),
        cls_token=parameter(rng.standard_normal(config.dim) * 0.02) if config.use_class_token else None,
        blocks=[init_block(config.dim, config.heads, rng, config.mlp_ratio) for _ in range(config.depth)],
    )


def init_head(dim: int, num_classes: int, rng: np.random.Generator) -> ClassifierHead:
    return ClassifierHead(norm=init_layer_norm(dim), fc=init_linear(dim, num_classes, rng))


def init_vit(config: EncoderConfig, rng: np.random.Generator) -> VisionTransformer:
    return VisionTransformer(config, init_encoder(config, rng), init_head(config.dim, config.num_classes, rng))


def embed(params: EncoderParams, patches) -> Tensor:
    """Project ``(B, N, patch_dim)`` patches and add positions; prepend the class token."""
    patches = constant(patches) if not isinstance(patches, Tensor) else patches
    b, n, _ = patches.shape
    if patches.shape[-1] != params.patch_embed.in_dim:
        raise ValueError(f"embed: patch dim {patches.shape[-1]} != {params.patch_embed.in_dim}")
    x = linear(params.patch_embed, patches)
    if params.cls_token is None:
        return x + params.pos_embed
    pos = params.pos_embed
    x = x + pos.index_select(np.arange(1, n + 1), axis=0)
    cls = params.cls_token + pos.index_select([0], axis=0)  # (1, dim)
    cls = cls + constant(np.zeros((b, 1, x.shape[-1]), dtype=get_dtype()))
    return concat([cls, x], axis=1)


@dataclass
class EncoderOutput:
    tokens: Tensor
    hidden: list[Tensor] = field(default_factory=list)  # output of every block
    attention: list[AttentionRecord] = field(default_factory=list)
    has_class_token: bool = True


def encode(
    config: EncoderConfig,
    params: EncoderParams,
    tokens: Tensor,
    record: bool = False,
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    """Run every block.  ``rng`` enables stochastic depth (training only)."""
    if tokens.shape[-1] != config.dim:
        raise ValueError(f"encode: token dim {tokens.shape[-1]} != {config.dim}")
    out = EncoderOutput(tokens, has_class_token=config.use_class_token)
    depth = len(params.blocks)
    rates = np.linspace(0.0, config.drop_path, depth) if depth else []
    x = tokens
    for block, rate in zip(params.blocks, rates):
        x, rec = transformer_block(block, x, record=record, drop_rate=float(rate), rng=rng)
        out.hidden.append(x)
        if rec is not None:
            out.attention.append(rec)
    out.tokens = x
    return out


def pool(tokens: Tensor, use_class_token: bool) -> Tensor:
    if use_class_token:
        return tokens.index_select([0], axis=1).reshape(tokens.shape[0], tokens.shape[-1])
    return tokens.mean(axis=1)


def classify(head: ClassifierHead, latent: Tensor, use_class_token: bool = True) -> Tensor:
    """Logits ``(B, K)`` from the class token, or from mean-pooled tokens."""
    pooled = pool(latent, use_class_token)
    return linear(head.fc, layer_norm(pooled, head.norm.gamma, head.norm.beta))


def forward(model: VisionTransformer, images: np.ndarray, record: bool = False, rng=None):
    """Images ``(B, H, W, C)`` to ``(logits, EncoderOutput)``."""
    cfg = model.config
    tokens = embed(model.encoder, patchify(images, cfg.grid))
    out = encode(cfg, model.encoder, tokens, record=record, rng=rng)
    return classify(model.head, out.tokens, cfg.use_class_token), out


def _target_distribution(target, num_classes: int) -> np.ndarray:
    target = np.asarray(target)
    if target.ndim == 1 and np.issubdtype(target.dtype, np.integer):
        if target.min(initial=0) < 0 or target.max(initial=0) >= num_classes:
            raise ValueError("class index out of range")
        return np.eye(num_classes)[target]
    if target.ndim == 1:
        target = target[None]
    if not np.allclose(target.sum(axis=-1), 1.0, atol=1e-6) or (target < 0).any():
        raise ValueError("target rows must be probability distributions")
    return target


def cross_entropy(logits: Tensor, target, smoothing: float = 0.0) -> Tensor:
    """Mean over the batch of ``-sum(t' * log_softmax(logits))``.

    ``target`` is either class indices ``(B,)`` or distributions ``(B, K)``;
    ``t' = (1 - smoothing) * t + smoothing / K``.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    k = logits.shape[-1]
    t = _target_distribution(target, k)
    t = (1.0 - smoothing) * t + smoothing / k
    logp = apply("log_softmax", [logits], axis=-1)
    return -(logp * constant(t.astype(get_dtype()))).sum(axis=-1).mean()
