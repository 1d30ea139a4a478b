"""AdamW with decoupled weight decay, plus the cosine learning-rate rule.

Parameters live in plain ``{name: Tensor}`` dicts; a step returns a new
dict (tensors are immutable) while the moment estimates are kept inside
`OptimizerState` and updated in place.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError, TrainingError
from .tensor import Tensor

__all__ = ["OptimizerState", "adamw_step", "cosine_lr"]


@dataclass
class OptimizerState:
    """First/second moment estimates and hyperparameters for AdamW."""

    base_lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState,
               lr: float) -> dict:
    """One AdamW update; returns the new parameter dict.

    Weight decay is decoupled: it scales each parameter directly and is
    not added to the gradient. Moments are bias-corrected. A parameter
    with no entry in `grads` is treated as having zero gradient.
    """
    if lr < 0:
        raise ContractError(f"negative learning rate {lr}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params = {}
    for name, p in params.items():
        g = grads.get(name)
        gd = np.zeros_like(p.data) if g is None else np.asarray(
            g.data if isinstance(g, Tensor) else g, dtype=p.dtype)
        if gd.shape != p.shape:
            raise ShapeError(f"gradient shape {gd.shape} does not match "
                             f"parameter '{name}' shape {p.shape}")
        if not np.all(np.isfinite(gd)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * gd
        v = state.beta2 * v + (1.0 - state.beta2) * gd * gd
        state.m[name], state.v[name] = m, v
        mhat = m / bc1
        vhat = v / bc2
        new = p.data * (1.0 - lr * state.weight_decay) \
            - lr * mhat / (np.sqrt(vhat) + state.eps)
        new_params[name] = Tensor._wrap(new.astype(p.dtype))
    return new_params


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from base_lr down to 0 over total_steps.

    The caller is responsible for pre-scaling base_lr by its batch-size
    rule before passing it here.
    """
    if total_steps <= 0:
        raise ContractError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0
