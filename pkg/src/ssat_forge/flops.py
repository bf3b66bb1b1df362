"""Analytic FLOP counts for the encoder and the reconstruction branch.

Only linear maps and the two attention matmuls are counted.  The default
``convention="mac"`` reports multiply-accumulates, the unit common vision tooling
(e.g. fvcore) labels "FLOPs"; ``convention="flop"`` doubles it.
"""

from __future__ import annotations

from .ssat import DecoderConfig, masked_count
from .vit import EncoderConfig

_FACTOR = {"mac": 1, "flop": 2}


def linear_flops(tokens: int, in_dim: int, out_dim: int, convention: str = "flop") -> int:
    return _FACTOR[convention] * tokens * in_dim * out_dim


def block_macs(tokens: int, dim: int, mlp_ratio: float = 4.0) -> int:
    hidden = int(dim * mlp_ratio)
    projections = 4 * tokens * dim * dim  # q, k, v, out
    attention = 2 * tokens * tokens * dim  # q k^T and attn v
    mlp = 2 * tokens * dim * hidden
    return projections + attention + mlp


def encoder_macs(cfg: EncoderConfig, visible_patches: int | None = None) -> int:
    grid = cfg.grid
    n_patches = grid.num_patches
    kept = n_patches if visible_patches is None else visible_patches
    tokens = kept + int(cfg.use_class_token)
    embed = n_patches * grid.patch_dim * cfg.dim  # every patch is embedded before masking
    return embed + cfg.depth * block_macs(tokens, cfg.dim, cfg.mlp_ratio)


def head_macs(cfg: EncoderConfig) -> int:
    return cfg.dim * cfg.num_classes


def decoder_macs(cfg: EncoderConfig, dec: DecoderConfig, visible_patches: int) -> int:
    grid = cfg.grid
    n = grid.num_patches
    return (
        visible_patches * cfg.dim * dec.dim
        + dec.depth * block_macs(n, dec.dim, dec.mlp_ratio)
        + n * dec.dim * grid.patch_dim
    )


def estimate_flops(
    encoder: EncoderConfig,
    decoder: DecoderConfig | None = None,
    mode: str = "scratch",
    mask_ratio: float = 0.75,
    convention: str = "mac",
) -> int:
    """Forward cost per image.

    ``scratch``/``finetune``: encoder + head.  ``ssl_pretrain``: masked
    encoder + decoder.  ``ssat``: both.
    """
    if convention not in _FACTOR:
        raise ValueError(f"convention must be 'mac' or 'flop', got {convention!r}")
    full = encoder_macs(encoder) + head_macs(encoder)
    if mode in ("scratch", "finetune"):
        return _FACTOR[convention] * full
    if decoder is None:
        raise ValueError(f"mode {mode!r} needs a decoder config")
    n = encoder.grid.num_patches
    visible = n - masked_count(n, mask_ratio)
    masked_branch = encoder_macs(encoder, visible) + decoder_macs(encoder, decoder, visible)
    if mode == "ssl_pretrain":
        return _FACTOR[convention] * masked_branch
    if mode == "ssat":
        return _FACTOR[convention] * (full + masked_branch)
    raise ValueError(f"unknown mode {mode!r}")
