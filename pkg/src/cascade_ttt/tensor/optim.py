"""Parameter updates: Adam, plain SGD, and exponential moving averages.

Parameters are handled as ``{name: ndarray}`` dicts.  Updates always build new
arrays, so a snapshot taken before a step is never mutated by it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .engine import NonFiniteError, ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _check_grads(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name!r}")


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; parameters without a gradient are kept.

    Validation happens before anything is touched, so a bad gradient leaves
    both ``params`` and ``state`` as they were.
    """
    _check_grads(params, grads)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = dict(params)
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        out[name] = params[name] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             lr: float) -> dict[str, np.ndarray]:
    _check_grads(params, grads)
    out = dict(params)
    for name, g in grads.items():
        out[name] = params[name] - lr * g
    return out


def ema_update(target: Mapping[str, np.ndarray], online: Mapping[str, np.ndarray],
               tau: float) -> dict[str, np.ndarray]:
    """Return ``tau * target + (1 - tau) * online`` for every entry."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {tau}")
    if set(target) != set(online):
        raise ShapeError(f"EMA partitions differ: {sorted(target)} vs {sorted(online)}")
    out = {}
    for name, t in target.items():
        o = online[name]
        if t.shape != o.shape:
            raise ShapeError(f"EMA shape mismatch for {name!r}: {t.shape} vs {o.shape}")
        out[name] = tau * t + (1.0 - tau) * o
    return out


class Adam:
    """Adam over a dict of leaf tensors, reading gradients from ``.grad``."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grads: Mapping[str, np.ndarray] | None = None) -> None:
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        values = {k: p.data for k, p in self.params.items()}
        new = adam_step(self.state, values, grads)
        for k, p in self.params.items():
            p.data = new[k]
