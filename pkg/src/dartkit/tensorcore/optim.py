"""AdamW with decoupled weight decay, and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .nn import Parameter


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or Inf; the update was not applied."""


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    exp_avg: Dict[int, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[int, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Sequence[Parameter], state: OptimizerState) -> OptimizerState:
    """Apply one AdamW update in place, using each parameter's ``grad``.

    Decay is decoupled: ``p <- p * (1 - lr*wd)`` and then the bias-corrected
    Adam step. A missing gradient counts as zero.
    """
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter #{i} (shape {g.shape})")
    state.step += 1
    t = state.step
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.exp_avg.get(i)
        if m is None:
            m = state.exp_avg[i] = np.zeros_like(p.data)
            state.exp_avg_sq[i] = np.zeros_like(p.data)
        v = state.exp_avg_sq[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= p.data.dtype.type(1.0 - lr * state.weight_decay)
        denom = np.sqrt(v / bc2) + state.epsilon
        p.data -= (lr * (m / bc1) / denom).astype(p.data.dtype)
    return state


def clip_grad_norm(params: Sequence[Parameter], max_norm: float = 1.0) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads: List[np.ndarray] = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= g.dtype.type(scale)
    return total
