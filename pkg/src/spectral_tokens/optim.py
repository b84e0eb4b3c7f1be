"""Moment-adaptive optimiser with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decay_names: frozenset = frozenset()
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
) -> dict[str, Tensor]:
    """One update of every parameter named in ``grads``; returns a new dict.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`` with the decay
    applied only to names in ``state.decay_names``.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = dict(params)
    for name, g in grads.items():
        p = params[name].data
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        if name in state.decay_names:
            update = update + state.weight_decay * p
        out[name] = Tensor(p - state.lr * update, requires_grad=True)
    return out
