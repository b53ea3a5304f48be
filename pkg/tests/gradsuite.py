"""Gradient-check cases shared by the module tests and the acceptance suite.

Each case is ``factory(rng) -> (build, arrays)``: ``build`` turns a dict of
Tensors into a scalar loss and ``arrays`` holds random inputs.  Losses weight
their outputs by a fixed random matrix so every output entry matters.
"""

from __future__ import annotations

import numpy as np

from cascade_ttt import tensor as T
from cascade_ttt.auxiliary import (AugmentedPair, Augmentation, Branches, aux_objective, byol_loss,
                                   predict, project, target_pair)
from cascade_ttt.backbone import adapt, customize, encode, encode_customized, lstm_sequence, two_pass
from cascade_ttt.data import Cascade, SocialGraph, build_hypergraphs
from cascade_ttt.heads import (macro_loss, macro_predict, masked_cross_entropy, micro_logits,
                               micro_loss, primary_loss, seen_mask)
from cascade_ttt.tensor.gradcheck import gradcheck
from cascade_ttt.user_rep import encode_diffusion, encode_social

N_INSTANCES = 20
TOL = 1e-4


def _u(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _away_from_zero(rng, *shape):
    x = _u(rng, *shape)
    return np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-12) * 0.1, x)


def _weighted(out, w):
    return (out * T.constant(w)).sum()


def _dims(rng, k=2):
    return [int(v) for v in rng.integers(1, 6, size=k)]


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------

def case_matmul(rng):
    n, k = _dims(rng)
    m = int(rng.integers(1, 6))
    w = _u(rng, n, m)
    return (lambda t: _weighted(T.matmul(t["a"], t["b"]), w)), {"a": _u(rng, n, k), "b": _u(rng, k, m)}


def case_matvec(rng):
    k, m = _dims(rng)
    w = _u(rng, m)
    return (lambda t: _weighted(T.matmul(t["a"], t["b"]), w)), {"a": _u(rng, k), "b": _u(rng, k, m)}


def _binary(op):
    def case(rng):
        shape = _dims(rng)
        w = _u(rng, *shape)
        return (lambda t: _weighted(op(t["a"], t["b"]), w)), {"a": _u(rng, *shape), "b": _u(rng, *shape)}
    return case


def _unary(op, positive=False, kink=False):
    def case(rng):
        shape = _dims(rng)
        w = _u(rng, *shape)
        if positive:
            x = _u(rng, *shape, lo=0.1, hi=2.0)
        elif kink:
            x = _away_from_zero(rng, *shape)
        else:
            x = _u(rng, *shape)
        return (lambda t: _weighted(op(t["x"]), w)), {"x": x}
    return case


def case_scalar_ops(rng):
    shape = _dims(rng)
    w = _u(rng, *shape)
    c = float(rng.uniform(0.5, 2.0))
    return (lambda t: _weighted((t["x"] * c - 1.0) / c + t["s"] * 2.0, w)), {"x": _u(rng, *shape), "s": _u(rng)}


def case_concat(rng):
    n, d1 = _dims(rng)
    d2 = int(rng.integers(1, 6))
    axis = int(rng.integers(0, 2))
    a = _u(rng, n, d1)
    b = _u(rng, n, d2) if axis == 1 else _u(rng, d2, d1)
    w = _u(rng, *np.concatenate([a, b], axis=axis).shape)
    return (lambda t: _weighted(T.concat([t["a"], t["b"]], axis=axis), w)), {"a": a, "b": b}


def case_stack_rows(rng):
    d = int(rng.integers(1, 6))
    w = _u(rng, 3, d)
    return (lambda t: _weighted(T.stack_rows([t["a"], t["b"], t["a"]]), w)), {"a": _u(rng, d), "b": _u(rng, d)}


def case_slice(rng):
    n, d = _dims(rng)
    lo = int(rng.integers(0, n))
    hi = int(rng.integers(lo + 1, n + 1))
    w = _u(rng, hi - lo, d)
    return (lambda t: _weighted(t["x"][lo:hi], w)), {"x": _u(rng, n, d)}


def case_take_rows(rng):
    n, d = _dims(rng)
    rows = rng.integers(0, n, size=4)
    w = _u(rng, 4, d)
    return (lambda t: _weighted(T.take_rows(t["x"], rows), w)), {"x": _u(rng, n, d)}


def case_reshape_transpose(rng):
    n, d = _dims(rng)
    w = _u(rng, d, n)
    w2 = _u(rng, n * d)
    return (lambda t: _weighted(T.transpose(t["x"]), w) + _weighted(T.reshape(t["x"], (n * d,)), w2)), \
        {"x": _u(rng, n, d)}


def case_broadcast(rng):
    n, d = _dims(rng)
    w = _u(rng, n, d)
    return (lambda t: _weighted(T.broadcast_to(t["b"], (n, d)), w)), {"b": _u(rng, d)}


def case_sum_mean(rng):
    n, d = _dims(rng)
    w0, w1 = _u(rng, d), _u(rng, n)
    return (lambda t: _weighted(T.sum(t["x"], axis=0), w0) + _weighted(T.mean(t["x"], axis=1), w1)
            + T.mean(t["x"])), {"x": _u(rng, n, d)}


def case_spmm(rng):
    import scipy.sparse as sp
    n, d = _dims(rng)
    m = int(rng.integers(1, 6))
    mat = sp.random(m, n, density=0.6, random_state=int(rng.integers(1 << 31)), format="csr")
    w = _u(rng, m, d)
    return (lambda t: _weighted(T.spmm(mat, t["x"]), w)), {"x": _u(rng, n, d)}


def case_softmax(rng):
    n, d = _dims(rng)
    w = _u(rng, n, d)
    return (lambda t: _weighted(T.softmax(t["x"]), w)), {"x": _u(rng, n, d)}


def case_l2_normalize(rng):
    n, d = _dims(rng)
    w = _u(rng, n, d)
    return (lambda t: _weighted(T.l2_normalize(t["x"]), w)), {"x": _away_from_zero(rng, n, d)}


OP_CASES = {
    "matmul": case_matmul,
    "matvec": case_matvec,
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "neg": _unary(T.neg),
    "scalar_ops": case_scalar_ops,
    "concat": case_concat,
    "stack_rows": case_stack_rows,
    "slice": case_slice,
    "take_rows": case_take_rows,
    "reshape_transpose": case_reshape_transpose,
    "broadcast_to": case_broadcast,
    "sum_mean": case_sum_mean,
    "spmm": case_spmm,
    "sigmoid": _unary(T.sigmoid),
    "tanh": _unary(T.tanh),
    "relu": _unary(T.relu, kink=True),
    "softplus": _unary(T.softplus),
    "log": _unary(T.log, positive=True),
    "exp": _unary(T.exp),
    "softmax": case_softmax,
    "l2_normalize": case_l2_normalize,
}


# ---------------------------------------------------------------------------
# composed modules
# ---------------------------------------------------------------------------

def _small(rng, *shape, scale=0.5):
    return rng.normal(0.0, scale, size=shape)


def case_gcn(rng):
    n, d = 5, 3
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.5]
    adj = SocialGraph(num_users=n, edges=edges).normalized_adjacency()
    w = _u(rng, n, d)
    arrays = {"x0": _small(rng, n, d), "gcn_W0": _small(rng, d, d), "gcn_b0": _small(rng, d),
              "gcn_W1": _small(rng, d, d), "gcn_b1": _small(rng, d)}
    return (lambda t: _weighted(encode_social(adj, t["x0"], t), w)), arrays


def _toy_hypergraph(rng, n=5, T_=3):
    cs = []
    for i in range(4):
        k = int(rng.integers(1, 4))
        users = tuple(int(u) for u in rng.choice(n, size=k, replace=False))
        ts = tuple(float(v) for v in np.sort(rng.uniform(0, 6, size=k)))
        cs.append(Cascade(id=f"h{i}", users=users, timestamps=ts, final_size=k))
    hg = build_hypergraphs(cs, T_, n)
    return [hg.propagation_matrices(t) for t in range(hg.T) if hg.intervals[t].hyperedges]


def case_hgnn(rng):
    n, d = 5, 3
    intervals = _toy_hypergraph(rng, n)
    w = _u(rng, n, d)
    arrays = {"x0": _small(rng, n, d), "hgnn_Wu0": _small(rng, d, d), "hgnn_We0": _small(rng, d, d),
              "gate_w": _small(rng, 2 * d, 1), "gate_b": _small(rng, 1)}
    return (lambda t: _weighted(encode_diffusion(intervals, t["x0"], t), w)), arrays


def case_lstm(rng):
    L, din, d = int(rng.integers(1, 5)), 3, 2
    w = _u(rng, L, d)
    arrays = {"x": _u(rng, L, din), "w_ih": _small(rng, din, 4 * d), "w_hh": _small(rng, d, 4 * d),
              "b": _small(rng, 4 * d)}
    return (lambda t: _weighted(lstm_sequence(t["x"], t["w_ih"], t["w_hh"], t["b"]), w)), arrays


def _encoder_arrays(rng, d):
    out = {}
    for branch, din in (("shared", 2 * d), ("micro", d), ("macro", d)):
        out[f"{branch}_W_ih"] = _small(rng, din, 4 * d)
        out[f"{branch}_W_hh"] = _small(rng, d, 4 * d)
        out[f"{branch}_b"] = _small(rng, 4 * d, scale=0.1)
    return out


def _adaptor_arrays(rng, d):
    return {"W1": _small(rng, 4 * d, 2 * d), "b1": _small(rng, 2 * d, scale=0.1),
            "W2": _small(rng, 2 * d, 6 * d * d, scale=0.3), "b2": _small(rng, 6 * d * d, scale=0.1)}


def _sub(t, prefix):
    return {k[len(prefix):]: v for k, v in t.items() if k.startswith(prefix)}


def case_encoder(rng):
    n, d = 5, 2
    seq = [int(u) for u in rng.choice(n, size=int(rng.integers(1, 5)), replace=False)]
    w = _u(rng, len(seq), 4 * d)
    arrays = {"xs": _u(rng, n, d), "xd": _u(rng, n, d), **{f"enc.{k}": v for k, v in _encoder_arrays(rng, d).items()}}

    def build(t):
        r = encode(seq, t["xs"], t["xd"], _sub(t, "enc."))
        return _weighted(T.concat([r.h_sm, r.h_sp], axis=1), w)
    return build, arrays


def case_film(rng):
    d = int(rng.integers(1, 4))
    w = _u(rng, d, 4 * d)
    return (lambda t: _weighted(customize({"shared_W_hh": t["W"], "micro_W_hh": t["W"], "macro_W_hh": t["W"]},
                                          {b: (t["g"], t["be"]) for b in ("shared", "micro", "macro")})["micro"], w)), \
        {"W": _u(rng, d, 4 * d), "g": _u(rng, d, d), "be": _u(rng, d, d)}


def case_adaptor(rng):
    n, d = 5, 2
    seq = [int(u) for u in rng.choice(n, size=int(rng.integers(2, 4)), replace=False)]
    xs, xd = T.constant(_u(rng, n, d)), T.constant(_u(rng, n, d))
    enc = {k: T.constant(v) for k, v in _encoder_arrays(rng, d).items()}
    w = _u(rng, len(seq), 2 * d)

    def build(t):
        _, _, custom = two_pass(seq, xs, xd, enc, t)
        return _weighted(custom.h_sp, w)
    return build, _adaptor_arrays(rng, d)


def case_adapt_outputs(rng):
    d = 2
    w = {b: (_u(rng, d, d), _u(rng, d, d)) for b in ("shared", "micro", "macro")}

    def build(t):
        out = adapt(t["e"], {k: t[k] for k in ("W1", "b1", "W2", "b2")})
        total = T.constant(0.0)
        for b, (gw, bw) in w.items():
            total = total + _weighted(out[b][0], gw) + _weighted(out[b][1], bw)
        return total
    return build, {"e": _u(rng, 4 * d), **_adaptor_arrays(rng, d)}


def _mlp_arrays(rng, din, dhid, dout, prefix):
    return {f"{prefix}W1": _small(rng, din, dhid), f"{prefix}b1": _small(rng, dhid, scale=0.3),
            f"{prefix}W2": _small(rng, dhid, dout), f"{prefix}b2": _small(rng, dout, scale=0.1)}


def case_projector_predictor(rng):
    d = 3
    w = _u(rng, d)
    arrays = {"v": _u(rng, 2 * d), **_mlp_arrays(rng, 2 * d, 2 * d, d, "q."), **_mlp_arrays(rng, d, d, d, "p.")}
    return (lambda t: _weighted(predict(project(t["v"], _sub(t, "q.")), _sub(t, "p.")), w)), arrays


def _heads_arrays(rng, d, n):
    return {"macro_W1": _small(rng, 2 * d, d), "macro_b1": _small(rng, d, scale=0.3),
            "macro_W2": _small(rng, d, 1), "macro_b2": _small(rng, 1),
            "micro_W": _small(rng, 2 * d, n), "micro_b": _small(rng, n)}


def case_macro_head(rng):
    d, n = 3, 5
    y = float(rng.integers(1, 20))
    return (lambda t: macro_loss(macro_predict(t["s"], t), [y])), {"s": _u(rng, 2 * d), **_heads_arrays(rng, d, n)}


def case_micro_head(rng):
    d, n = 2, 6
    users = [int(u) for u in rng.permutation(n)[:int(rng.integers(2, 6))]]
    arrays = {"states": _u(rng, len(users), 2 * d), **_heads_arrays(rng, d, n)}
    return (lambda t: micro_loss(t["states"], users, t)), arrays


def case_masked_ce(rng):
    p, n = int(rng.integers(1, 4)), 6
    users = [int(u) for u in rng.permutation(n)[:p + 1]]
    positions = list(range(1, p + 1))
    ex = seen_mask(users, positions, n)
    return (lambda t: masked_cross_entropy(t["z"], users[1:], ex)), {"z": _u(rng, p, n)}


def case_macro_loss(rng):
    k = int(rng.integers(1, 5))
    y = rng.integers(0, 30, size=k).astype(float)
    return (lambda t: macro_loss(t["yhat"], y)), {"yhat": _u(rng, k, lo=0.1, hi=30.0)}


def case_byol(rng):
    d = int(rng.integers(2, 6))
    return (lambda t: byol_loss(t["r"], t["z"])), {"r": _away_from_zero(rng, d), "z": _away_from_zero(rng, d)}


def case_primary_loss(rng):
    lam = float(rng.uniform(0, 1))
    return (lambda t: primary_loss(t["a"].sum(), t["b"].sum(), lam) * 1.0), {"a": _u(rng, 2), "b": _u(rng, 3)}


def case_aux_objective(rng):
    n, d = 6, 2
    L = int(rng.integers(2, 4))
    seq = tuple(int(u) for u in rng.choice(n, size=L, replace=False))
    masked = tuple(n if rng.random() < 0.3 else u for u in seq)
    shuffled = tuple(reversed(seq))
    pair = AugmentedPair(masked=masked, shuffled=shuffled, descriptor=Augmentation((), 0, ()))
    xs, xd = T.constant(_u(rng, n + 1, d)), T.constant(_u(rng, n + 1, d))
    enc = {k: T.constant(v) for k, v in _encoder_arrays(rng, d).items()}
    tgt_a = {k: T.constant(v) for k, v in _adaptor_arrays(rng, d).items()}
    tgt_q = {k: T.constant(v) for k, v in _mlp_arrays(rng, 2 * d, 2 * d, d, "").items()}
    arrays = {**{f"a.{k}": v for k, v in _adaptor_arrays(rng, d).items()},
              **_mlp_arrays(rng, 2 * d, 2 * d, d, "q."), **_mlp_arrays(rng, d, d, d, "p.")}

    # target branch is constant, so its projections are computed once
    targets = target_pair(pair, xs, xd, Branches(enc, None, None, None, tgt_a, tgt_q))

    def build(t):
        br = Branches(encoder=enc, adaptor=_sub(t, "a."), projector=_sub(t, "q."), predictor=_sub(t, "p."),
                      target_adaptor=tgt_a, target_projector=tgt_q)
        return aux_objective(pair, xs, xd, br, targets=targets)
    return build, arrays


def case_customized_encoder(rng):
    n, d = 4, 2
    seq = [int(u) for u in rng.choice(n, size=3, replace=False)]
    xs, xd = T.constant(_u(rng, n, d)), T.constant(_u(rng, n, d))
    enc = _encoder_arrays(rng, d)
    w = _u(rng, 3, 2 * d)

    def build(t):
        params = {b: (t[f"g.{b}"], t[f"b.{b}"]) for b in ("shared", "micro", "macro")}
        return _weighted(encode_customized(seq, xs, xd, _sub(t, "enc."), params).h_sm, w)
    arrays = {f"enc.{k}": v for k, v in enc.items()}
    for b in ("shared", "micro", "macro"):
        arrays[f"g.{b}"] = _u(rng, d, d, lo=0.5, hi=1.5)
        arrays[f"b.{b}"] = _small(rng, d, d, scale=0.2)
    return build, arrays


MODULE_CASES = {
    "gcn": case_gcn,
    "hgnn": case_hgnn,
    "lstm": case_lstm,
    "encoder": case_encoder,
    "film": case_film,
    "customized_encoder": case_customized_encoder,
    "adaptor_two_pass": case_adaptor,
    "adaptor_outputs": case_adapt_outputs,
    "projector_predictor": case_projector_predictor,
    "macro_head": case_macro_head,
    "micro_head": case_micro_head,
    "masked_cross_entropy": case_masked_ce,
    "macro_loss": case_macro_loss,
    "byol_loss": case_byol,
    "primary_loss": case_primary_loss,
    "aux_objective": case_aux_objective,
}

ALL_CASES = {**OP_CASES, **MODULE_CASES}


def worst_error(name: str, n_instances: int = N_INSTANCES, seed: int = 0) -> float:
    """Largest relative error of case ``name`` over ``n_instances`` random instances."""
    factory = ALL_CASES[name]
    worst = 0.0
    for i in range(n_instances):
        rng = np.random.default_rng([seed, i, len(name)])
        build, arrays = factory(rng)
        worst = max(worst, max(gradcheck(build, arrays).values()))
    return worst
