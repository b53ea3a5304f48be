"""Self-supervised auxiliary task: two augmented views, online vs. target branch.

The online branch runs the two-pass backbone, mean-pools the customized
h'_sm and h'_sp, projects each and passes it through the predictor.  The
target branch does the same without the predictor and never records a
gradient.  The loss is the normalized squared distance, summed over both
view orderings.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .backbone import two_pass
from .tensor import Tensor, concat, ema_update, l2_normalize, no_grad, relu

MASK_PROB = 0.2
SHUFFLE_FRACTION = 0.2


@dataclass(frozen=True)
class Augmentation:
    """Replayable description of the two views."""
    mask_positions: tuple[int, ...]
    shuffle_start: int
    shuffle_perm: tuple[int, ...]


@dataclass(frozen=True)
class AugmentedPair:
    masked: tuple[int, ...]
    shuffled: tuple[int, ...]
    descriptor: Augmentation


def augmentation_seed(base_seed: int, cascade_id: str, salt: int = 0) -> int:
    """Stable per-cascade seed (does not depend on Python's hash randomization)."""
    return (zlib.crc32(cascade_id.encode("utf-8")) * 1_000_003 + base_seed * 7919 + salt) % (2 ** 63)


def draw_augmentation(length: int, rng: np.random.Generator, mask_prob: float = MASK_PROB,
                      shuffle_fraction: float = SHUFFLE_FRACTION) -> Augmentation:
    masked = tuple(int(i) for i in np.flatnonzero(rng.random(length) < mask_prob))
    span = max(1, int(round(shuffle_fraction * length)))
    span = min(span, length)
    start = int(rng.integers(0, length - span + 1))
    perm = tuple(int(i) for i in rng.permutation(span))
    # at least one view must differ from the source; short prefixes often
    # draw no mask and a trivial shuffle, so mask one position instead
    if length > 1 and mask_prob > 0 and not masked and perm == tuple(range(span)):
        masked = (int(rng.integers(0, length)),)
    return Augmentation(mask_positions=masked, shuffle_start=start, shuffle_perm=perm)


def apply_augmentation(seq: Sequence[int], desc: Augmentation, mask_index: int) -> AugmentedPair:
    seq = tuple(seq)
    masked = list(seq)
    for i in desc.mask_positions:
        masked[i] = mask_index
    span = seq[desc.shuffle_start:desc.shuffle_start + len(desc.shuffle_perm)]
    shuffled = list(seq)
    for k, j in enumerate(desc.shuffle_perm):
        shuffled[desc.shuffle_start + k] = span[j]
    return AugmentedPair(masked=tuple(masked), shuffled=tuple(shuffled), descriptor=desc)


def augment(seq: Sequence[int], seed: int, mask_index: int, mask_prob: float = MASK_PROB,
            shuffle_fraction: float = SHUFFLE_FRACTION) -> AugmentedPair:
    """Masking view (each position -> MASK with ``mask_prob``) and span-shuffle view."""
    if len(seq) < 1:
        raise ValueError("cannot augment an empty sequence")
    rng = np.random.default_rng(seed)
    desc = draw_augmentation(len(seq), rng, mask_prob, shuffle_fraction)
    return apply_augmentation(seq, desc, mask_index)


# ---------------------------------------------------------------------------
# projector / predictor
# ---------------------------------------------------------------------------

def init_projector(dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(2 * dim), size=(2 * dim, 2 * dim)),
        "b1": np.zeros(2 * dim),
        "W2": rng.normal(0.0, 1.0 / np.sqrt(2 * dim), size=(2 * dim, dim)),
        "b2": np.zeros(dim),
    }


def init_predictor(dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    # residual MLP; zero output layer makes it the identity at init
    return {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim)),
        "b1": np.zeros(dim),
        "W2": np.zeros((dim, dim)),
        "b2": np.zeros(dim),
    }


def project(v: Tensor, q: Mapping[str, Tensor]) -> Tensor:
    return relu(v @ q["W1"] + q["b1"]) @ q["W2"] + q["b2"]


def predict(v: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return v + relu(v @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]


def byol_loss(r: Tensor, z: Tensor) -> Tensor:
    """Squared distance of the l2-normalized vectors, i.e. 2 - 2 cos(r, z)."""
    diff = l2_normalize(r) - l2_normalize(z)
    return (diff * diff).sum()


# ---------------------------------------------------------------------------
# branches
# ---------------------------------------------------------------------------

def _pooled(view, xs, xd, enc, adaptor):
    _, _, custom = two_pass(view, xs, xd, enc, adaptor)
    return custom.h_sm.mean(axis=0), custom.h_sp.mean(axis=0)


def online_prediction(view, xs, xd, enc, adaptor, projector, predictor) -> Tensor:
    sm, sp = _pooled(view, xs, xd, enc, adaptor)
    return concat([predict(project(sm, projector), predictor), predict(project(sp, projector), predictor)])


def target_projection(view, xs, xd, enc, adaptor, projector) -> Tensor:
    """Target branch output; always a constant (no tape)."""
    with no_grad():
        sm, sp = _pooled(view, xs, xd, enc, adaptor)
        return concat([project(sm, projector), project(sp, projector)])


@dataclass
class Branches:
    """Parameters of the online branch and of the target branch."""
    encoder: Mapping[str, Tensor]
    adaptor: Mapping[str, Tensor]
    projector: Mapping[str, Tensor]
    predictor: Mapping[str, Tensor]
    target_adaptor: Mapping[str, Tensor]
    target_projector: Mapping[str, Tensor]


def target_pair(pair: AugmentedPair, xs, xd, br: Branches) -> tuple[Tensor, Tensor]:
    """Target projections of (masked view, shuffled view)."""
    return (target_projection(pair.masked, xs, xd, br.encoder, br.target_adaptor, br.target_projector),
            target_projection(pair.shuffled, xs, xd, br.encoder, br.target_adaptor, br.target_projector))


def aux_objective(pair: AugmentedPair, xs, xd, br: Branches,
                  targets: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """L(online(a), target(ã)) + L(online(ã), target(a)).

    ``targets`` may carry precomputed target projections, which is how the
    meta phase keeps its target fixed across inner steps.
    """
    z_a, z_b = targets if targets is not None else target_pair(pair, xs, xd, br)
    r_a = online_prediction(pair.masked, xs, xd, br.encoder, br.adaptor, br.projector, br.predictor)
    r_b = online_prediction(pair.shuffled, xs, xd, br.encoder, br.adaptor, br.projector, br.predictor)
    return byol_loss(r_a, z_b) + byol_loss(r_b, z_a)


def update_target(online: Mapping[str, np.ndarray], target: Mapping[str, np.ndarray],
                  tau: float) -> dict[str, np.ndarray]:
    """xi <- tau * xi + (1 - tau) * theta."""
    return ema_update(target, online, tau)
