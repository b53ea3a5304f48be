"""Popularity (macro) and next-user (micro) heads and their losses."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .tensor import Tensor, broadcast_to, log, record, relu, softplus
from .tensor.engine import DomainError, ShapeError


def init_heads(dim: int, num_users: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "macro_W1": rng.normal(0.0, 1.0 / np.sqrt(2 * dim), size=(2 * dim, dim)),
        "macro_b1": np.zeros(dim),
        "macro_W2": rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, 1)),
        "macro_b2": np.zeros(1),
        "micro_W": rng.normal(0.0, 1.0 / np.sqrt(2 * dim), size=(2 * dim, num_users)),
        "micro_b": np.zeros(num_users),
    }


def macro_predict(summary: Tensor, heads: Mapping[str, Tensor]) -> Tensor:
    """2d summary -> non-negative popularity (shape ``(1,)``)."""
    hidden = relu(summary @ heads["macro_W1"] + heads["macro_b1"])
    return softplus(hidden @ heads["macro_W2"] + heads["macro_b2"])


def micro_logits(states: Tensor, heads: Mapping[str, Tensor]) -> Tensor:
    """Scores over real users for each row of ``states`` (P x 2d -> P x N)."""
    bias = heads["micro_b"]
    return states @ heads["micro_W"] + broadcast_to(bias, (states.shape[0], bias.shape[0]))


def seen_mask(users: Sequence[int], positions: Sequence[int], num_users: int) -> np.ndarray:
    """Boolean (len(positions) x N): True for users adopted before each target position."""
    mask = np.zeros((len(positions), num_users), dtype=bool)
    for r, pos in enumerate(positions):
        mask[r, list(users[:pos])] = True
    return mask


def masked_cross_entropy(logits: Tensor, targets: Sequence[int], excluded: np.ndarray | None = None) -> Tensor:
    """Sum over rows of -log softmax(logits)[target], excluded entries removed from the softmax."""
    z = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] != targets.shape[0]:
        raise ShapeError(f"logits {z.shape} do not match {targets.shape[0]} targets")
    rows = np.arange(z.shape[0])
    if excluded is not None:
        if excluded.shape != z.shape:
            raise ShapeError(f"mask shape {excluded.shape} differs from logits {z.shape}")
        if excluded[rows, targets].any():
            raise ValueError("a target user is masked out")
        zm = np.where(excluded, -np.inf, z)
    else:
        zm = z
    top = zm.max(axis=1, keepdims=True)
    e = np.exp(zm - top)
    tot = e.sum(axis=1, keepdims=True)
    probs = e / tot
    lse = (top + np.log(tot)).ravel()
    loss = float((lse - z[rows, targets]).sum())

    def _bw(g):
        grad = probs.copy()
        grad[rows, targets] -= 1.0
        return (g * grad,)

    return record(np.array(loss), (logits,), _bw, "masked_cross_entropy")


def micro_probabilities(logits: np.ndarray, excluded: np.ndarray | None = None) -> np.ndarray:
    z = np.where(excluded, -np.inf, logits) if excluded is not None else logits
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def macro_loss(pred: Tensor, true) -> Tensor:
    """Mean squared log error with natural log: mean((log(1+ŷ) - log(1+y))^2)."""
    y = np.asarray(true, dtype=np.float64).reshape(pred.shape)
    if (pred.data < 0).any() or (y < 0).any():
        raise DomainError("MSLE needs non-negative predictions and targets")
    diff = log(pred + 1.0) - Tensor(np.log1p(y))
    return (diff * diff).mean()


def micro_loss(states: Tensor, users: Sequence[int], heads: Mapping[str, Tensor],
               positions: Sequence[int] | None = None, mask_seen: bool = True) -> Tensor | None:
    """Cross-entropy summed over target positions (default 1..len-1).

    The state at position ``i - 1`` scores the user at position ``i``.
    Returns None when there is nothing to predict.
    """
    if positions is None:
        positions = range(1, len(users))
    positions = list(positions)
    if not positions:
        return None
    if not _contiguous(positions):
        raise ValueError("target positions must be contiguous")
    rows = states[positions[0] - 1:positions[-1]]
    logits = micro_logits(rows, heads)
    n = heads["micro_b"].shape[0]
    excluded = seen_mask(users, positions, n) if mask_seen else None
    return masked_cross_entropy(logits, [users[p] for p in positions], excluded)


def _contiguous(positions: Sequence[int]) -> bool:
    return all(b == a + 1 for a, b in zip(positions, positions[1:]))


def primary_loss(micro, macro, lam: float):
    """(1 - lam) * micro + lam * macro."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"loss weight must lie in [0, 1], got {lam}")
    return (1.0 - lam) * micro + lam * macro
