"""Shared sequence encoder (three LSTMs) and the per-input FiLM adaptor.

Every forward is two passes: ``encode`` with the stored encoder, pool the
result into a summary vector, let the adaptor turn that summary into
(gamma, beta) pairs, then ``encode`` again with the recurrent matrices
modulated by those pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .tensor import Tensor, concat, mean, record, relu, take_rows, tanh
from .tensor.engine import ShapeError, _stable_sigmoid

BRANCHES = ("shared", "micro", "macro")
GAMMA_SCALE = 0.5


@dataclass
class CascadeRepr:
    h_s: Tensor
    h_m: Tensor
    h_p: Tensor
    h_sm: Tensor
    h_sp: Tensor

    def summary(self, n: int | None = None) -> Tensor:
        """Concatenated time-means of h_sm and h_sp over the first ``n`` steps."""
        n = self.h_sm.shape[0] if n is None else n
        return concat([mean(self.h_sm[0:n], axis=0), mean(self.h_sp[0:n], axis=0)])


def init_encoder(dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    bound = 1.0 / np.sqrt(dim)
    p = {}
    for branch, din in zip(BRANCHES, (2 * dim, dim, dim)):
        p[f"{branch}_W_ih"] = rng.uniform(-bound, bound, size=(din, 4 * dim))
        p[f"{branch}_W_hh"] = rng.uniform(-bound, bound, size=(dim, 4 * dim))
        p[f"{branch}_b"] = np.zeros(4 * dim)
    return p


def lstm_sequence(x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> Tensor:
    """Run an LSTM over the rows of ``x`` from a zero state; returns all hidden states.

    Gate order in the 4d columns is input, forget, cell, output.  Forward and
    backpropagation-through-time are fused into a single tape node.
    """
    X, Wi, Wh, bb = x.data, w_ih.data, w_hh.data, b.data
    if X.ndim != 2 or X.shape[0] == 0:
        raise ShapeError(f"LSTM input must be a non-empty sequence matrix, got {X.shape}")
    d = Wh.shape[0]
    if Wi.shape != (X.shape[1], 4 * d) or Wh.shape != (d, 4 * d) or bb.shape != (4 * d,):
        raise ShapeError(f"LSTM weights {Wi.shape}, {Wh.shape}, {bb.shape} do not fit input {X.shape}")
    L = X.shape[0]
    pre = X @ Wi + bb
    hs = np.zeros((L + 1, d))
    cs = np.zeros((L + 1, d))
    acts = np.empty((L, 4 * d))
    for t in range(L):
        z = pre[t] + hs[t] @ Wh
        a = acts[t]
        a[:d] = _stable_sigmoid(z[:d])
        a[d:2 * d] = _stable_sigmoid(z[d:2 * d])
        a[2 * d:3 * d] = np.tanh(z[2 * d:3 * d])
        a[3 * d:] = _stable_sigmoid(z[3 * d:])
        cs[t + 1] = a[d:2 * d] * cs[t] + a[:d] * a[2 * d:3 * d]
        hs[t + 1] = a[3 * d:] * np.tanh(cs[t + 1])

    def _bw(G):
        dpre = np.empty((L, 4 * d))
        dh_next = np.zeros(d)
        dc_next = np.zeros(d)
        for t in range(L - 1, -1, -1):
            a = acts[t]
            i, f, g, o = a[:d], a[d:2 * d], a[2 * d:3 * d], a[3 * d:]
            tc = np.tanh(cs[t + 1])
            dh = G[t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dpre[t]
            dz[:d] = dc * g * i * (1.0 - i)
            dz[d:2 * d] = dc * cs[t] * f * (1.0 - f)
            dz[2 * d:3 * d] = dc * i * (1.0 - g * g)
            dz[3 * d:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = Wh @ dz
        return dpre @ Wi.T, X.T @ dpre, hs[:-1].T @ dpre, dpre.sum(axis=0)

    return record(hs[1:].copy(), (x, w_ih, w_hh, b), _bw, "lstm")


def encode(seq: Sequence[int], xs: Tensor, xd: Tensor, enc: Mapping[str, Tensor],
           recurrent: Mapping[str, Tensor] | None = None) -> CascadeRepr:
    """Encode a user sequence; ``recurrent`` optionally overrides each branch's W_hh."""
    if len(seq) == 0:
        raise ValueError("cannot encode an empty sequence")
    rows = np.asarray(seq, dtype=np.int64)
    us = take_rows(xs, rows)
    ud = take_rows(xd, rows)

    def w_hh(branch):
        return recurrent[branch] if recurrent is not None else enc[f"{branch}_W_hh"]

    h_s = lstm_sequence(concat([us, ud], axis=1), enc["shared_W_ih"], w_hh("shared"), enc["shared_b"])
    h_m = lstm_sequence(us, enc["micro_W_ih"], w_hh("micro"), enc["micro_b"])
    h_p = lstm_sequence(ud, enc["macro_W_ih"], w_hh("macro"), enc["macro_b"])
    return CascadeRepr(h_s=h_s, h_m=h_m, h_p=h_p,
                       h_sm=concat([h_s, h_m], axis=1), h_sp=concat([h_s, h_p], axis=1))


def init_adaptor(dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Hidden layer random, output layer zero so the adaptor starts at the identity."""
    return {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(4 * dim), size=(4 * dim, 2 * dim)),
        "b1": np.zeros(2 * dim),
        "W2": np.zeros((2 * dim, 6 * dim * dim)),
        "b2": np.zeros(6 * dim * dim),
    }


def adapt(summary: Tensor, adaptor: Mapping[str, Tensor]) -> dict[str, tuple[Tensor, Tensor]]:
    """Map a 4d summary to one (gamma, beta) pair of d x d matrices per LSTM branch.

    gamma = 1 + 0.5 * tanh(raw) keeps the scale in [0.5, 1.5]; beta = raw.
    """
    d = summary.shape[0] // 4
    hidden = relu(summary @ adaptor["W1"] + adaptor["b1"])
    raw = hidden @ adaptor["W2"] + adaptor["b2"]
    out = {}
    block = d * d
    for k, branch in enumerate(BRANCHES):
        g_raw = raw[2 * k * block:(2 * k + 1) * block].reshape(d, d)
        b_raw = raw[(2 * k + 1) * block:(2 * k + 2) * block].reshape(d, d)
        out[branch] = (1.0 + GAMMA_SCALE * tanh(g_raw), b_raw)
    return out


def film(w: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """W * gamma + beta applied to each d x d gate block of a d x 4d recurrent matrix."""
    return w * concat([gamma] * 4, axis=1) + concat([beta] * 4, axis=1)


def customize(enc: Mapping[str, Tensor], params: Mapping[str, tuple[Tensor, Tensor]]) -> dict[str, Tensor]:
    return {b: film(enc[f"{b}_W_hh"], *params[b]) for b in BRANCHES}


def encode_customized(seq, xs, xd, enc, params) -> CascadeRepr:
    return encode(seq, xs, xd, enc, recurrent=customize(enc, params))


def two_pass(seq, xs, xd, enc, adaptor, n_summary: int | None = None):
    """encode -> adapt -> customize -> encode; returns (first pass, film params, customized pass).

    The adaptor only sees the first ``n_summary`` steps; the customized pass
    still runs over the whole sequence.
    """
    n = len(seq) if n_summary is None else n_summary
    first = encode(seq[:n], xs, xd, enc)
    params = adapt(first.summary(), adaptor)
    return first, params, encode_customized(seq, xs, xd, enc, params)
