"""Adam with coupled L2 decay, and the warm-up + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError, ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, weight_decay: float = 0.0):
    """One Adam update of every parameter that received a gradient.

    Parameters whose ``grad`` is None (not on the loss path this iteration)
    are left untouched, moments included.  Decay is added to the gradient.
    """
    if lr < 0:
        raise InputError(f"learning rate must be >= 0, got {lr}")
    for name, p in params.items():
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"gradient shape {p.grad.shape} != parameter shape {p.shape} for {name}")
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if weight_decay:
            g = g + p.data * weight_decay
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


class Adam:
    def __init__(self, named_params, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.weight_decay = weight_decay
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        adam_step(self.params, self.state, lr, self.weight_decay)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-3
    warmup_epochs: int = 1
    total_epochs: int = 15

    def __post_init__(self):
        if self.base_lr <= 0:
            raise InputError("base_lr must be positive")
        if self.warmup_epochs < 0 or self.total_epochs <= 0:
            raise InputError("epoch counts must be non-negative / positive")
        if self.warmup_epochs >= self.total_epochs and self.warmup_epochs > 0:
            raise InputError("warm-up must end before the last epoch")


def lr_at(schedule: LrSchedule, epoch: float) -> float:
    """Linear warm-up to ``base_lr`` then cosine decay to 0 at ``total_epochs``."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise InputError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    w, total = schedule.warmup_epochs, schedule.total_epochs
    if epoch < w:
        return schedule.base_lr * epoch / w
    frac = (epoch - w) / (total - w)
    return max(0.0, schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac)))
