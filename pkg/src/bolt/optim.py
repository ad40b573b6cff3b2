"""AdamW over named parameter vectors plus the warmup-cosine schedule.

Functional style: ``adamw_step`` returns new parameters and a new state
instead of mutating its arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import NumericError, ValidationError


@dataclass(frozen=True)
class OptimState:
    lr_max: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 20
    warmup_epochs: int = 2
    batch_size: int = 32
    step: int = 0
    m1: Mapping[str, np.ndarray] = field(default_factory=dict, compare=False, repr=False)
    m2: Mapping[str, np.ndarray] = field(default_factory=dict, compare=False, repr=False)

    def fresh(self) -> "OptimState":
        return replace(self, step=0, m1={}, m2={})


def lr_schedule(step: int, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    """Linear warmup to ``lr_max`` then half-cosine decay to zero at ``total_steps``."""
    if total_steps < 1 or not 0 <= warmup_steps < total_steps:
        raise ValidationError(f"need 0 <= warmup_steps < total_steps, got {warmup_steps}, {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside 0..{total_steps}")
    if step < warmup_steps:
        return lr_max * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    if progress == 1.0:
        return 0.0
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(
    state: OptimState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
) -> tuple[dict[str, np.ndarray], OptimState]:
    for name, g in grads.items():
        if name not in params or np.shape(g) != np.shape(params[name]):
            raise ValidationError(f"gradient for {name!r} does not match its parameter")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in layer {name!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, m1, m2 = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * state.m1.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.m2.get(name, 0.0) + (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps_adam)
        p_new = p - lr * update
        if state.weight_decay:
            p_new = p_new - lr * state.weight_decay * p
        new_params[name], m1[name], m2[name] = p_new, m, v
    return new_params, replace(state, step=t, m1=m1, m2=m2)
