"""AdamW with per-parameter lr scaling, and the warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import GradientMap, Tensor


@dataclass
class ParamGroup:
    name: str
    tensor: Tensor
    lr_scale: float = 1.0
    weight_decay: bool = True


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_update(
    param: np.ndarray,
    grad: np.ndarray,
    exp_avg: np.ndarray,
    exp_avg_sq: np.ndarray,
    step: int,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One in-place AdamW update of a single array (``step`` counts from 1)."""
    if param.shape != grad.shape or param.shape != exp_avg.shape:
        raise ValueError(f"adamw: shape mismatch param {param.shape} grad {grad.shape}")
    if not lr > 0:
        raise ValueError("adamw: lr must be positive")
    b1, b2 = betas
    param *= 1.0 - lr * weight_decay
    exp_avg *= b1
    exp_avg += (1.0 - b1) * grad
    exp_avg_sq *= b2
    exp_avg_sq += (1.0 - b2) * grad * grad
    m_hat = exp_avg / (1.0 - b1**step)
    v_hat = exp_avg_sq / (1.0 - b2**step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    """Decoupled weight decay, bias-corrected Adam, per-group lr scale."""

    def __init__(
        self,
        groups: list[ParamGroup],
        weight_decay: float = 0.05,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.groups = groups
        self.weight_decay = weight_decay
        self.betas = tuple(betas)
        self.eps = eps
        self.state = OptimizerState()
        for g in groups:
            self.state.exp_avg[g.name] = np.zeros_like(g.tensor.data)
            self.state.exp_avg_sq[g.name] = np.zeros_like(g.tensor.data)
        self.last_lrs: dict[str, float] = {}

    def step(self, grads: GradientMap, lr: float) -> None:
        self.state.step += 1
        t = self.state.step
        for g in self.groups:
            grad = grads.get(g.tensor)
            if grad is None:
                grad = np.zeros_like(g.tensor.data)
            eff = lr * g.lr_scale
            self.last_lrs[g.name] = eff
            adamw_update(
                g.tensor.data,
                grad.astype(g.tensor.data.dtype, copy=False),
                self.state.exp_avg[g.name],
                self.state.exp_avg_sq[g.name],
                t,
                eff,
                self.weight_decay if g.weight_decay else 0.0,
                self.betas,
                self.eps,
            )


def layer_id(name: str, depth: int) -> int:
    """Depth index used for layer-wise lr decay.

    Embeddings are layer 0, encoder block ``i`` is ``i + 1`` and everything
    after the encoder (classifier head, decoder) is ``depth + 1``.
    """
    if name.startswith("encoder.blocks."):
        return int(name.split(".")[2]) + 1
    if name.startswith("encoder."):
        return 0
    return depth + 1


def no_weight_decay(name: str, tensor: Tensor) -> bool:
    return tensor.ndim <= 1 or name.endswith(("pos_embed", "cls_token", "mask_token"))


def build_groups(named_params, depth: int, layer_decay: float = 0.75) -> list[ParamGroup]:
    """Block ``i`` (0-based) gets ``layer_decay ** (depth - i)``; the head gets 1."""
    groups = []
    for name, t in named_params:
        scale = layer_decay ** (depth + 1 - layer_id(name, depth))
        groups.append(ParamGroup(name, t, scale, not no_weight_decay(name, t)))
    return groups


def lr_schedule(
    step: int,
    total_steps: int,
    warmup_steps: int,
    base_lr: float = 1e-3,
    warmup_lr: float = 1e-6,
    min_lr: float = 1e-6,
) -> float:
    """Linear warmup ``warmup_lr -> base_lr`` then cosine ``base_lr -> min_lr``.

    The last step (``total_steps - 1``) lands exactly on ``min_lr``.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return warmup_lr + (base_lr - warmup_lr) * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    if span <= 0:
        return base_lr
    progress = (step - warmup_steps) / span
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
