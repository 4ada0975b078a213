"""AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class AdamWState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **hyper) -> "AdamWState":
        state = cls(**hyper)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float | None = None,
    frozen: frozenset[str] | set[str] = frozenset(),
) -> None:
    """One in-place AdamW update of ``params`` and ``state``.

    Weight decay is applied to the parameter directly (``θ -= lr·λ·θ``),
    separately from the bias-corrected moment step. Names in ``frozen`` are
    left untouched, moments included.
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in sorted(params):
        if name in frozen:
            continue
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"adamw_step: shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        denom = np.sqrt(v / c2)
        denom += state.eps
        p -= (lr / c1) * m / denom


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return math.ceil(warmup_ratio * total_steps)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0.0 <= warmup_ratio < 1.0:
        raise ConfigError(f"warmup_ratio must be in [0, 1), got {warmup_ratio}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, warmup_ratio)
    if step < warm:
        return base_lr * step / warm
    if step == warm:
        return base_lr
    progress = (step - warm) / (total_steps - warm)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
