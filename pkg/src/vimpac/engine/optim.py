"""AdamW with decoupled weight decay, global-norm clipping and a linear
warm-up / linear decay learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, lr, decay_mask=None):
    """One bias-corrected Adam update using each parameter's ``grad``.

    ``params`` maps names to tensors. Weight decay shrinks a parameter by
    ``lr * weight_decay`` before the moment update and is skipped for names
    where ``decay_mask`` returns False.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        if state.weight_decay and (decay_mask is None or decay_mask(name)):
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_global_norm(tensors, max_norm=1.0):
    """Scale every ``grad`` so the global L2 norm is at most ``max_norm``; return the scale."""
    grads = [t.grad for t in tensors if t.grad is not None]
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for t in tensors:
        if t.grad is not None:
            t.grad *= scale
    return scale


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float
    total_steps: int
    warmup_ratio: float = 0.1

    def __post_init__(self):
        if self.peak_lr <= 0 or self.total_steps < 1 or not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError(f"invalid schedule {self}")

    @property
    def warmup_steps(self):
        return self.warmup_ratio * self.total_steps


def lr_at(step, schedule: LrSchedule):
    """Linear ramp from 0 to the peak over the warm-up, then linear decay to 0 at ``total_steps``."""
    if not 1 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [1, {schedule.total_steps}]")
    warm = schedule.warmup_steps
    if step < warm:
        return schedule.peak_lr * step / warm
    tail = schedule.total_steps - warm
    return schedule.peak_lr * (schedule.total_steps - step) / tail
