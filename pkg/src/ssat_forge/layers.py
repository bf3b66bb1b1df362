"""Transformer building blocks written against the tape engine."""

from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass
from typing import Iterator

import numpy as np

from .tensor import Tensor, apply, constant, get_dtype, parameter

LN_EPS = 1e-6


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every trainable tensor reachable from ``obj``."""
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_parameters(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key, item in obj.items():
            yield from named_parameters(item, f"{prefix}.{key}" if prefix else str(key))


# ---------------------------------------------------------------------------
# linear


@dataclass
class LinearParams:
    weight: Tensor  # (out_dim, in_dim)
    bias: Tensor  # (out_dim,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"inconsistent linear shapes {self.weight.shape} / {self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def init_linear(in_dim: int, out_dim: int, rng: np.random.Generator, std: float = 0.02) -> LinearParams:
    return LinearParams(
        weight=parameter(trunc_normal(rng, (out_dim, in_dim), std)),
        bias=parameter(np.zeros(out_dim)),
    )


def linear(params: LinearParams, x: Tensor) -> Tensor:
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"linear: token dim {x.shape[-1]} != in_dim {params.in_dim}")
    return apply("linear", [x, params.weight, params.bias])


# ---------------------------------------------------------------------------
# layer norm


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


def init_layer_norm(dim: int) -> LayerNormParams:
    return LayerNormParams(gamma=parameter(np.ones(dim)), beta=parameter(np.zeros(dim)))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-token standardisation over channels, then ``* gamma + beta``."""
    if not eps > 0:
        raise ValueError("layer_norm: eps must be positive")
    return apply("normalize", [x], eps=eps) * gamma + beta


def layer_norm_reference(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """The same map built from elementwise primitives and reductions."""
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered * (var + eps) ** -0.5
    return normed * gamma + beta


def _ln(p: LayerNormParams, x: Tensor) -> Tensor:
    return layer_norm(x, p.gamma, p.beta)


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    out: LinearParams
    heads: int

    def __post_init__(self):
        if self.q.out_dim % self.heads:
            raise ValueError(f"model dim {self.q.out_dim} not divisible by {self.heads} heads")


@dataclass
class AttentionRecord:
    """Softmax attention weights, shape ``(batch, heads, n, n)``; rows sum to 1."""

    weights: np.ndarray

    @property
    def heads(self) -> int:
        return self.weights.shape[-3]

    @property
    def tokens(self) -> int:
        return self.weights.shape[-1]


def init_attention(dim: int, heads: int, rng: np.random.Generator) -> AttentionParams:
    if dim % heads:
        raise ValueError(f"model dim {dim} not divisible by {heads} heads")
    return AttentionParams(
        q=init_linear(dim, dim, rng),
        k=init_linear(dim, dim, rng),
        v=init_linear(dim, dim, rng),
        out=init_linear(dim, dim, rng),
        heads=heads,
    )


def multi_head_attention(
    params: AttentionParams, x: Tensor, record: bool = False
) -> tuple[Tensor, AttentionRecord | None]:
    """Scaled dot-product self-attention over ``x`` of shape ``(batch, n, dim)``."""
    b, n, d = x.shape
    h = params.heads
    if d % h:
        raise ValueError(f"model dim {d} not divisible by {h} heads")
    hd = d // h

    def split(t: Tensor) -> Tensor:
        return t.reshape(b, n, h, hd).transpose(0, 2, 1, 3)

    q = split(linear(params.q, x) * (1.0 / np.sqrt(hd)))
    k = split(linear(params.k, x))
    v = split(linear(params.v, x))
    scores = q @ k.transpose(0, 1, 3, 2)
    attn = scores.softmax(axis=-1)
    mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    rec = AttentionRecord(attn.data.copy()) if record else None
    return linear(params.out, mixed), rec


# ---------------------------------------------------------------------------
# transformer block


@dataclass
class BlockParams:
    norm1: LayerNormParams
    attn: AttentionParams
    norm2: LayerNormParams
    fc1: LinearParams
    fc2: LinearParams


def init_block(dim: int, heads: int, rng: np.random.Generator, mlp_ratio: float = 4.0) -> BlockParams:
    hidden = int(dim * mlp_ratio)
    return BlockParams(
        norm1=init_layer_norm(dim),
        attn=init_attention(dim, heads, rng),
        norm2=init_layer_norm(dim),
        fc1=init_linear(dim, hidden, rng),
        fc2=init_linear(hidden, dim, rng),
    )


def mlp(params: BlockParams, x: Tensor) -> Tensor:
    return linear(params.fc2, linear(params.fc1, x).gelu())


def drop_path(branch: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Stochastic depth: zero a residual branch per sample, rescale survivors."""
    if rate <= 0.0 or rng is None:
        return branch
    keep = 1.0 - rate
    mask = (rng.random(branch.shape[0]) < keep).astype(get_dtype()) / keep
    return branch * constant(mask.reshape((-1,) + (1,) * (branch.ndim - 1)))


def transformer_block(
    params: BlockParams,
    x: Tensor,
    record: bool = False,
    drop_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, AttentionRecord | None]:
    """Pre-norm residual block: ``x + MHA(LN(x))`` then ``+ MLP(LN(.))``."""
    attended, rec = multi_head_attention(params.attn, _ln(params.norm1, x), record=record)
    x = x + drop_path(attended, drop_rate, rng)
    x = x + drop_path(mlp(params, _ln(params.norm2, x)), drop_rate, rng)
    return x, rec
