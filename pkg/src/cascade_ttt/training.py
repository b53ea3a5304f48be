"""Joint training, meta-auxiliary training and per-cascade test-time adaptation."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import metrics
from .auxiliary import Branches, aux_objective, augment, augmentation_seed, target_pair, update_target
from .backbone import two_pass
from .config import TrainConfig
from .data import (Cascade, Dataset, DatasetSplit, DiffusionHypergraphs, build_hypergraphs,
                   chronological_split, observed_length)
from .heads import macro_loss, macro_predict, micro_logits, micro_loss, primary_loss, seen_mask
from .state import ADAPTED_PARTITIONS, META_PARTITIONS, ModelState, init_state
from .tensor import NonFiniteError, Tensor, adam_step, backward, no_grad, sgd_step
from .tensor.optim import AdamState
from .user_rep import GraphContext, user_embeddings

log = logging.getLogger(__name__)

TRAINABLE_JOINT = ("user_rep", "encoder", "adaptor", "projector", "predictor", "heads")
FROZEN_AFTER_JOINT = frozenset({"user_rep", "encoder"})
WORKERS_ENV = "CASCADE_TTT_WORKERS"


class TrainingError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class Problem:
    """A dataset with its chronological split and the derived graph structures."""
    dataset: Dataset
    split: DatasetSplit
    hypergraphs: DiffusionHypergraphs
    ctx: GraphContext

    @classmethod
    def from_dataset(cls, dataset: Dataset, cfg: TrainConfig) -> "Problem":
        split = chronological_split(dataset.cascades, cfg.split)
        hg = build_hypergraphs(split.train, cfg.intervals, dataset.num_users)
        return cls(dataset=dataset, split=split, hypergraphs=hg, ctx=GraphContext.build(dataset.graph, hg))

    @property
    def num_users(self) -> int:
        return self.dataset.num_users


# ---------------------------------------------------------------------------
# per-cascade pieces
# ---------------------------------------------------------------------------

def _flatten(tensors: Mapping[str, Mapping[str, Tensor]]) -> dict[str, Tensor]:
    return {f"{p}/{k}": t for p, d in tensors.items() for k, t in d.items()}


def _grads(flat: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in flat.items()}


def primary_terms(c: Cascade, xs, xd, enc, adaptor, heads, cfg: TrainConfig,
                  positions: Sequence[int] | None = None):
    """(summed micro cross-entropy or None, predicted popularity) for one cascade.

    The adaptor sees the observed prefix; the customized encoder runs over the
    whole sequence (causal, so prefix states only depend on the prefix).
    """
    n_obs = observed_length(len(c), cfg.obs_fraction)
    _, _, custom = two_pass(c.users, xs, xd, enc, adaptor, n_summary=n_obs)
    if cfg.macro_summary == "last":
        summary = custom.h_sp[n_obs - 1]
    else:
        summary = custom.h_sp[0:n_obs].mean(axis=0)
    yhat = macro_predict(summary, heads)
    micro = micro_loss(custom.h_sm, c.users, heads, positions, mask_seen=cfg.seen_mask)
    return micro, yhat


def cascade_primary_loss(c: Cascade, xs, xd, enc, adaptor, heads, cfg: TrainConfig) -> Tensor:
    micro, yhat = primary_terms(c, xs, xd, enc, adaptor, heads, cfg)
    msle = macro_loss(yhat, [c.final_size])
    if micro is None:
        micro = Tensor(0.0)
    return primary_loss(micro, msle, cfg.lam)


def make_pair(c: Cascade, cfg: TrainConfig, num_users: int, salt: int):
    n_obs = observed_length(len(c), cfg.obs_fraction)
    return augment(c.users[:n_obs], augmentation_seed(cfg.seed, c.id, salt), num_users,
                   cfg.mask_prob, cfg.shuffle_fraction)


def batch_joint_loss(batch: Sequence[Cascade], xs, xd, tensors, cfg: TrainConfig,
                     num_users: int, salt: int, gamma: float):
    """Mean over the batch of the primary loss plus gamma times the auxiliary loss."""
    micro_terms, msle_terms, aux_terms = [], [], []
    br = None
    if gamma > 0:
        br = Branches(encoder=tensors["encoder"], adaptor=tensors["adaptor"],
                      projector=tensors["projector"], predictor=tensors["predictor"],
                      target_adaptor=tensors["target_adaptor"], target_projector=tensors["target_projector"])
    for c in batch:
        micro, yhat = primary_terms(c, xs, xd, tensors["encoder"], tensors["adaptor"], tensors["heads"], cfg)
        if micro is not None:
            micro_terms.append(micro)
        msle_terms.append(macro_loss(yhat, [c.final_size]))
        if gamma > 0:
            aux_terms.append(aux_objective(make_pair(c, cfg, num_users, salt), xs, xd, br))
    micro_mean = _mean(micro_terms) if micro_terms else Tensor(0.0)
    pri = primary_loss(micro_mean, _mean(msle_terms), cfg.lam)
    if aux_terms:
        aux = _mean(aux_terms)
        return pri + gamma * aux, pri, aux
    return pri, pri, None


def _mean(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / len(terms)


def frozen_embeddings(state: ModelState, problem: Problem) -> tuple[Tensor, Tensor]:
    with no_grad():
        return user_embeddings(problem.ctx, state.tensors("user_rep"))


def validation_primary(state: ModelState, problem: Problem, cascades: Sequence[Cascade]) -> float:
    if not cascades:
        return float("nan")
    cfg = state.config
    with no_grad():
        xs, xd = user_embeddings(problem.ctx, state.tensors("user_rep"))
        tensors = {p: state.tensors(p) for p in ("encoder", "adaptor", "heads")}
        _, pri, _ = batch_joint_loss(cascades, xs, xd, tensors, cfg, problem.num_users, 0, gamma=0.0)
    return pri.item()


# ---------------------------------------------------------------------------
# joint phase
# ---------------------------------------------------------------------------

def joint_train(problem: Problem, cfg: TrainConfig, state: ModelState | None = None,
                cascades: Sequence[Cascade] | None = None, select_best: bool = True):
    """Adam on L_Pri + gamma * L_Aux with an EMA target branch.

    Returns ``(state, history)``; the state is the best-validation snapshot
    when a validation split exists and ``select_best`` is set.
    """
    state = init_state(problem.num_users, cfg) if state is None else state.copy()
    state.config = cfg
    train = list(problem.split.train if cascades is None else cascades)
    valid = problem.split.valid if select_best else []
    rng = np.random.default_rng([cfg.seed, 1])
    tensors = {p: state.tensors(p, trainable=True) for p in TRAINABLE_JOINT}
    flat = _flatten(tensors)
    adam = AdamState(lr=cfg.lr)
    history = []
    best, best_val = None, float("inf")
    for epoch in range(cfg.joint_epochs):
        order = rng.permutation(len(train))
        totals = {"loss": 0.0, "primary": 0.0, "aux": 0.0}
        n_batches = 0
        for start in range(0, len(train), cfg.batch_size):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            for t in flat.values():
                t.grad = None
            tensors["target_adaptor"] = state.tensors("target_adaptor")
            tensors["target_projector"] = state.tensors("target_projector")
            try:
                xs, xd = user_embeddings(problem.ctx, tensors["user_rep"])
                loss, pri, aux = batch_joint_loss(batch, xs, xd, tensors, cfg, problem.num_users,
                                                  salt=epoch + 1, gamma=cfg.gamma)
                backward(loss)
                new = adam_step(adam, {k: t.data for k, t in flat.items()}, _grads(flat))
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value in joint training: {exc}",
                                    {"epoch": epoch, "batch_start": start, "history": history}) from exc
            for k, t in flat.items():
                t.data = new[k]
            for part in ("adaptor", "projector"):
                online = {k: t.data for k, t in tensors[part].items()}
                state.params[f"target_{part}"] = update_target(online, state.params[f"target_{part}"], cfg.tau)
            totals["loss"] += loss.item()
            totals["primary"] += pri.item()
            totals["aux"] += aux.item() if aux is not None else 0.0
            n_batches += 1
        for p in TRAINABLE_JOINT:
            state.params[p] = {k: t.data for k, t in tensors[p].items()}
        row = {"epoch": epoch + 1, **{k: v / max(n_batches, 1) for k, v in totals.items()}}
        if valid:
            row["valid_primary"] = validation_primary(state, problem, valid)
            if row["valid_primary"] < best_val:
                best_val = row["valid_primary"]
                best = state.copy()
        history.append(row)
        log.info("joint epoch %d loss %.5f primary %.5f aux %.5f%s", row["epoch"], row["loss"],
                 row["primary"], row["aux"],
                 f" valid {row['valid_primary']:.5f}" if valid else "")
    result = best if best is not None else state
    result.phase = "joint"
    result.frozen = frozenset()
    return result, history


# ---------------------------------------------------------------------------
# inner loop shared by meta training and test-time adaptation
# ---------------------------------------------------------------------------

def inner_adapt(pair, xs, xd, encoder: Mapping[str, Tensor], start: Mapping[str, Mapping[str, np.ndarray]],
                targets, steps: int, lr: float) -> dict[str, dict[str, np.ndarray]]:
    """``steps`` plain gradient-descent steps on the auxiliary loss.

    Only adaptor, projector and predictor move; ``targets`` are the fixed
    target projections produced by the starting model.
    """
    phi = {p: dict(start[p]) for p in ADAPTED_PARTITIONS}
    for _ in range(steps):
        tensors = {p: {k: Tensor(v, requires_grad=True) for k, v in phi[p].items()} for p in ADAPTED_PARTITIONS}
        br = Branches(encoder=encoder, adaptor=tensors["adaptor"], projector=tensors["projector"],
                      predictor=tensors["predictor"], target_adaptor=None, target_projector=None)
        loss = aux_objective(pair, xs, xd, br, targets=targets)
        backward(loss)
        for p in ADAPTED_PARTITIONS:
            grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in tensors[p].items()}
            phi[p] = sgd_step(phi[p], grads, lr)
    return phi


def meta_targets(pair, xs, xd, encoder, theta: Mapping[str, Mapping[str, np.ndarray]]):
    """Target projections from the meta-model itself (no separate EMA branch)."""
    br = Branches(encoder=encoder, adaptor=None, projector=None, predictor=None,
                  target_adaptor={k: Tensor(v) for k, v in theta["adaptor"].items()},
                  target_projector={k: Tensor(v) for k, v in theta["projector"].items()})
    return target_pair(pair, xs, xd, br)


def meta_task(c: Cascade, theta, xs, xd, encoder, cfg: TrainConfig, num_users: int, salt: int,
              need_grad: bool = True):
    """Inner adaptation on one cascade, then L_Meta at the adapted parameters.

    Returns ``(L_Meta value, grads)``; grads are first-order (taken at phi)
    and keyed ``partition/name``, or None when ``need_grad`` is false.
    """
    pair = make_pair(c, cfg, num_users, salt)
    targets = meta_targets(pair, xs, xd, encoder, theta)
    phi = inner_adapt(pair, xs, xd, encoder, theta, targets, cfg.inner_steps, cfg.inner_lr)
    phi["heads"] = theta["heads"]
    if not need_grad:
        with no_grad():
            value = _meta_loss(c, pair, targets, xs, xd, encoder,
                               {p: {k: Tensor(v) for k, v in phi[p].items()} for p in META_PARTITIONS}, cfg)
        return value.item(), None
    tensors = {p: {k: Tensor(v, requires_grad=True) for k, v in phi[p].items()} for p in META_PARTITIONS}
    loss = _meta_loss(c, pair, targets, xs, xd, encoder, tensors, cfg)
    backward(loss)
    return loss.item(), _grads(_flatten(tensors))


def _meta_loss(c, pair, targets, xs, xd, encoder, tensors, cfg: TrainConfig) -> Tensor:
    pri = cascade_primary_loss(c, xs, xd, encoder, tensors["adaptor"], tensors["heads"], cfg)
    if cfg.gamma == 0:
        return pri
    br = Branches(encoder=encoder, adaptor=tensors["adaptor"], projector=tensors["projector"],
                  predictor=tensors["predictor"], target_adaptor=None, target_projector=None)
    return pri + cfg.gamma * aux_objective(pair, xs, xd, br, targets=targets)


def meta_validation(theta, problem: Problem, xs, xd, encoder, cfg: TrainConfig,
                    cascades: Sequence[Cascade]) -> float:
    values = [meta_task(c, theta, xs, xd, encoder, cfg, problem.num_users, 0, need_grad=False)[0]
              for c in cascades]
    return float(np.mean(values)) if values else float("nan")


def meta_train(problem: Problem, state: ModelState, cfg: TrainConfig | None = None,
               cascades: Sequence[Cascade] | None = None, select_best: bool = True):
    """First-order meta-auxiliary training from a jointly trained state.

    Each iteration samples ``meta_batch`` cascades, adapts a private copy of
    adaptor/projector/predictor by ``inner_steps`` SGD steps on the
    auxiliary loss, and applies the summed L_Meta gradients (taken at the
    adapted parameters) to the meta-model with Adam at ``meta_lr``.
    User representations and the encoder stay frozen.
    """
    cfg = state.config if cfg is None else cfg
    state = state.copy()
    state.config = cfg
    state.frozen = FROZEN_AFTER_JOINT
    train = list(problem.split.train if cascades is None else cascades)
    valid = problem.split.valid if select_best else []
    xs, xd = frozen_embeddings(state, problem)
    encoder = state.tensors("encoder")
    theta = {p: dict(state.params[p]) for p in META_PARTITIONS}
    adam = AdamState(lr=cfg.meta_lr)
    rng = np.random.default_rng([cfg.seed, 2])
    history = []
    best_theta, best_val = None, float("inf")
    if valid:
        best_val = meta_validation(theta, problem, xs, xd, encoder, cfg, valid)
        best_theta = theta
        history.append({"iteration": 0, "meta_loss": float("nan"), "skipped": 0, "valid_meta": best_val})
    window_tasks = window_skipped = 0
    for it in range(1, cfg.meta_iterations + 1):
        picks = rng.choice(len(train), size=min(cfg.meta_batch, len(train)), replace=False)
        total: dict[str, np.ndarray] = {}
        values, skipped = [], 0
        for i in picks:
            try:
                value, grads = meta_task(train[i], theta, xs, xd, encoder, cfg, problem.num_users, salt=it)
            except NonFiniteError as exc:
                log.warning("meta iteration %d: skipping cascade %s (%s)", it, train[i].id, exc)
                skipped += 1
                continue
            values.append(value)
            for k, g in grads.items():
                total[k] = total[k] + g if k in total else g
        window_tasks += len(picks)
        window_skipped += skipped
        if total:
            flat_theta = {f"{p}/{k}": v for p in META_PARTITIONS for k, v in theta[p].items()}
            new = adam_step(adam, flat_theta, total)
            theta = {p: {k: new[f"{p}/{k}"] for k in theta[p]} for p in META_PARTITIONS}
        row = {"iteration": it, "meta_loss": float(np.mean(values)) if values else float("nan"),
               "skipped": skipped}
        if it % cfg.meta_eval_every == 0 or it == cfg.meta_iterations:
            if window_skipped > 0.1 * window_tasks:
                raise TrainingError(f"{window_skipped} of {window_tasks} meta tasks skipped (non-finite)",
                                    {"iteration": it, "history": history})
            window_tasks = window_skipped = 0
            if valid:
                row["valid_meta"] = meta_validation(theta, problem, xs, xd, encoder, cfg, valid)
                if row["valid_meta"] < best_val:
                    best_val, best_theta = row["valid_meta"], theta
            log.info("meta iteration %d loss %.5f%s", it, row["meta_loss"],
                     f" valid {row['valid_meta']:.5f}" if valid else "")
        history.append(row)
    final = best_theta if best_theta is not None else theta
    for p in META_PARTITIONS:
        state.params[p] = {k: v.copy() for k, v in final[p].items()}
    state.phase = "meta"
    return state, history


# ---------------------------------------------------------------------------
# test-time adaptation and evaluation
# ---------------------------------------------------------------------------

def ttt_adapt(state: ModelState, c: Cascade, xs, xd, steps: int | None = None,
              lr: float | None = None) -> dict[str, dict[str, np.ndarray]]:
    """Adapt adaptor/projector/predictor to one cascade's observed prefix.

    Returns the adapted partitions; ``state`` itself is never modified.
    """
    cfg = state.config
    steps = cfg.inner_steps if steps is None else steps
    lr = cfg.inner_lr if lr is None else lr
    if len(c) < 1:
        raise ValueError("cannot adapt to an empty cascade")
    encoder = state.tensors("encoder")
    theta = {p: state.params[p] for p in ADAPTED_PARTITIONS}
    if steps == 0:
        return {p: dict(theta[p]) for p in ADAPTED_PARTITIONS}
    pair = make_pair(c, cfg, state.num_users, salt=0)
    targets = meta_targets(pair, xs, xd, encoder, theta)
    return inner_adapt(pair, xs, xd, encoder, theta, targets, steps, lr)


@dataclass
class CascadePrediction:
    cascade_id: str
    popularity: float
    positions: list[int]
    ranks: list[int]
    true_users: list[int]


def predict_cascade(c: Cascade, xs, xd, encoder, adaptor, heads, cfg: TrainConfig) -> CascadePrediction:
    n_obs = observed_length(len(c), cfg.obs_fraction)
    first = 1 if cfg.eval_all_positions else n_obs
    positions = list(range(first, len(c)))
    with no_grad():
        _, _, custom = two_pass(c.users, xs, xd, encoder, adaptor, n_summary=n_obs)
        summary = custom.h_sp[n_obs - 1] if cfg.macro_summary == "last" else custom.h_sp[0:n_obs].mean(axis=0)
        yhat = macro_predict(summary, heads).item()
        ranks = []
        if positions:
            logits = micro_logits(custom.h_sm[positions[0] - 1:positions[-1]], heads).data
            excluded = seen_mask(c.users, positions, logits.shape[1]) if cfg.seen_mask else None
            for r, pos in enumerate(positions):
                ranks.append(metrics.rank_of(logits[r], c.users[pos],
                                             None if excluded is None else excluded[r]))
    return CascadePrediction(cascade_id=c.id, popularity=yhat, positions=positions,
                             ranks=ranks, true_users=[c.users[p] for p in positions])


def _worker_count(requested: int | None) -> int:
    if requested is not None:
        return max(1, requested)
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def evaluate(state: ModelState, problem: Problem, cascades: Sequence[Cascade] | None = None,
             delta: int = 0, alpha: float | None = None, workers: int | None = None) -> metrics.EvalReport:
    """Score cascades (test split by default), optionally after ``delta`` TTT steps each.

    Each cascade is adapted from the same meta-model, so results do not
    depend on evaluation order or worker count.
    """
    cfg = state.config
    cascades = list(problem.split.test if cascades is None else cascades)
    xs, xd = frozen_embeddings(state, problem)
    encoder = state.tensors("encoder")
    heads = state.tensors("heads")

    def run(c: Cascade) -> CascadePrediction:
        if delta > 0:
            phi = ttt_adapt(state, c, xs, xd, steps=delta, lr=alpha)
            adaptor = {k: Tensor(v) for k, v in phi["adaptor"].items()}
        else:
            adaptor = state.tensors("adaptor")
        return predict_cascade(c, xs, xd, encoder, adaptor, heads, cfg)

    n_workers = _worker_count(workers)
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            preds = list(pool.map(run, cascades))
    else:
        preds = [run(c) for c in cascades]
    by_id = {c.id: c for c in cascades}
    macro_rows = [metrics.MacroRow(p.cascade_id, float(by_id[p.cascade_id].final_size), p.popularity,
                                   metrics.msle_term(p.popularity, by_id[p.cascade_id].final_size))
                  for p in preds]
    micro_rows = [metrics.MicroRow(p.cascade_id, pos, u, r)
                  for p in preds for pos, u, r in zip(p.positions, p.true_users, p.ranks)]
    return metrics.EvalReport(macro_rows=macro_rows, micro_rows=micro_rows, hits_average=cfg.hits_average)
