from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    pass


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        raise ConfigError("cosine_lr needs total_steps > 0")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamWState:
    lr0: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, state: AdamWState, lr_now: float, grads: dict | None = None) -> None:
    """One in-place AdamW update with decoupled weight decay.

    ``params`` maps names to tensors; gradients default to each tensor's ``.grad``.
    Parameters without a gradient are left untouched, including weight decay.
    """
    state.step_count += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1**state.step_count
    bc2 = 1.0 - b2**state.step_count
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr_now == 0.0:
            continue
        p.data *= 1.0 - lr_now * state.weight_decay
        p.data -= lr_now * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
