"""AdamW with global-norm clipping and a linear warmup/decay schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .policy import BACKBONE_FIELDS, PolicyParams

__all__ = ["AdamWConfig", "OptimizerState", "linear_schedule", "clip_by_global_norm", "optimizer_step"]


@dataclass(frozen=True)
class AdamWConfig:
    lr_heads: float = 1e-4
    lr_backbone: float = 1e-5
    betas: tuple = (0.9, 0.99)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    warmup_ratio: float = 0.05
    total_updates: int = 1


@dataclass
class OptimizerState:
    m: PolicyParams
    v: PolicyParams
    step: int = 0

    @classmethod
    def zeros(cls, params: PolicyParams) -> "OptimizerState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), step=0)


def linear_schedule(step: int, total: int, warmup_ratio: float) -> float:
    """Multiplier in [0, 1]: 0 at step 0, ramps to 1 over the warmup, then decays to 0 at ``total``."""
    warmup = math.ceil(warmup_ratio * total)
    if warmup > 0 and step < warmup:
        return step / warmup
    if step >= total:
        return 0.0
    return (total - step) / max(total - warmup, 1)


def clip_by_global_norm(grads: PolicyParams, max_norm: float):
    norm = grads.global_norm()
    if max_norm > 0 and norm > max_norm:
        return grads.map(lambda g: g * (max_norm / norm)), norm
    return grads, norm


def optimizer_step(state: OptimizerState, params: PolicyParams, grads: PolicyParams,
                   cfg: AdamWConfig, step: int | None = None) -> tuple:
    """One AdamW descent step on ``grads`` (pass the negated objective gradient to ascend).

    Updates ``params`` and ``state`` in place and returns (params, lr multiplier, pre-clip norm).
    Weight decay is decoupled and only touches matrices.
    """
    if not grads.all_finite():
        raise FloatingPointError("non-finite gradient passed to optimizer_step")
    step = state.step if step is None else step
    mult = linear_schedule(step, cfg.total_updates, cfg.warmup_ratio)
    grads, norm = clip_by_global_norm(grads, cfg.grad_clip)
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = getattr(grads, name)
        m = getattr(state.m, name)
        v = getattr(state.v, name)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr = mult * (cfg.lr_backbone if name in BACKBONE_FIELDS else cfg.lr_heads)
        if lr == 0.0:
            continue
        if p.ndim == 2 and cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, mult, norm
