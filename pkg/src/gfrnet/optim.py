"""SGD with momentum, L2 weight decay, per-group lr multipliers and the poly schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def poly_lr(base_lr: float, it: int, max_iter: int, power: float = 0.9) -> float:
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return base_lr * (1.0 - it / max_iter) ** power


def default_decay(name: str) -> bool:
    """Weight decay applies to conv weights only, not biases or batch-norm affine."""
    return name.endswith(".w")


@dataclass
class OptState:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    power: float = 0.9
    max_iter: int = 1
    iter: int = 0
    decay_all: bool = False
    # prefix -> lr multiplier; the longest matching prefix wins
    lr_mult: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)
    schedule: bool = True

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.power <= 0:
            raise ValueError("power must be positive")

    def multiplier(self, name: str) -> float:
        best, mult = -1, 1.0
        for prefix, m in self.lr_mult.items():
            if name.startswith(prefix) and len(prefix) > best:
                best, mult = len(prefix), float(m)
        return mult

    def current_lr(self) -> float:
        if not self.schedule:
            return self.base_lr
        return poly_lr(self.base_lr, self.iter, self.max_iter, self.power)


def sgd_step(params: dict, grads: dict, state: OptState) -> float:
    """Update ``params`` in place; returns the scheduled lr used for this step.

    g' = grad + wd * param;  v <- momentum * v + g';  param <- param - lr * v
    """
    if state.schedule and state.iter >= state.max_iter:
        raise ValueError(f"iteration {state.iter} would exceed max_iter {state.max_iter}")
    lr = state.current_lr()
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if state.weight_decay and (state.decay_all or default_decay(name)):
            g = g + state.weight_decay * p
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ValueError(f"{name}: velocity shape {v.shape} != parameter shape {p.shape}")
        v = state.momentum * v + g
        state.velocity[name] = v
        p -= (lr * state.multiplier(name)) * v
    state.iter += 1
    return lr
