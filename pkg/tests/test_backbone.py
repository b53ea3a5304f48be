import math

import numpy as np
import pytest

from cascade_ttt import tensor as T
from cascade_ttt.backbone import (BRANCHES, adapt, customize, encode, encode_customized, film,
                                  init_adaptor, init_encoder, lstm_sequence, two_pass)


def _consts(p):
    return {k: T.constant(v) for k, v in p.items()}


def _setup(d=3, n=6, seed=0):
    rng = np.random.default_rng(seed)
    xs = T.constant(rng.normal(size=(n, d)))
    xd = T.constant(rng.normal(size=(n, d)))
    return rng, xs, xd, _consts(init_encoder(d, rng))


def _naive_lstm(X, Wi, Wh, b):
    """Step-by-step oracle with separate gate matrices."""
    d = Wh.shape[0]
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))  # noqa: E731
    gates = [slice(k * d, (k + 1) * d) for k in range(4)]
    h, c = np.zeros(d), np.zeros(d)
    out = []
    for x in X:
        i = sig(x @ Wi[:, gates[0]] + h @ Wh[:, gates[0]] + b[gates[0]])
        f = sig(x @ Wi[:, gates[1]] + h @ Wh[:, gates[1]] + b[gates[1]])
        g = np.tanh(x @ Wi[:, gates[2]] + h @ Wh[:, gates[2]] + b[gates[2]])
        o = sig(x @ Wi[:, gates[3]] + h @ Wh[:, gates[3]] + b[gates[3]])
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return np.array(out)


def test_lstm_matches_naive_oracle():
    rng = np.random.default_rng(1)
    d = 4
    X, Wi, Wh, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 4 * d)), rng.normal(size=(d, 4 * d)), rng.normal(size=4 * d)
    out = lstm_sequence(T.constant(X), T.constant(Wi), T.constant(Wh), T.constant(b))
    np.testing.assert_allclose(out.data, _naive_lstm(X, Wi, Wh, b), rtol=0, atol=1e-10)


def test_zero_weights_fixed_point():
    _, xs, xd, enc = _setup()
    zero = {k: T.constant(np.zeros(v.shape)) for k, v in enc.items()}
    r = encode([0, 1, 2], xs, xd, zero)
    assert not r.h_sm.data.any() and not r.h_sp.data.any()


def test_single_step_shapes():
    _, xs, xd, enc = _setup(d=3)
    r = encode([4], xs, xd, enc)
    assert r.h_s.shape == (1, 3) and r.h_sm.shape == (1, 6) and r.h_sp.shape == (1, 6)
    assert r.summary().shape == (12,)


def test_empty_sequence_rejected():
    _, xs, xd, enc = _setup()
    with pytest.raises(ValueError):
        encode([], xs, xd, enc)


def test_zero_adaptor_gives_identity_film():
    rng, xs, xd, enc = _setup()
    params = adapt(T.constant(rng.normal(size=12)), _consts(init_adaptor(3, rng)))
    for b in BRANCHES:
        gamma, beta = params[b]
        assert gamma.shape == beta.shape == (3, 3)
        np.testing.assert_array_equal(gamma.data, np.ones((3, 3)))
        np.testing.assert_array_equal(beta.data, np.zeros((3, 3)))


def test_adapt_hand_values():
    d = 2
    W1 = np.zeros((8, 4))
    W1[0, 0] = 2.0
    W2 = np.zeros((4, 24))
    W2[0, 0] = 0.25      # shared gamma[0,0] raw = 0.5
    W2[0, 4] = 1.5       # shared beta[0,0] = 3.0
    W2[0, 8 + 3] = -1.0  # micro gamma[1,1] raw = -2
    b2 = np.zeros(24)
    b2[20 + 1] = 0.7     # macro beta[0,1]
    e = np.zeros(8)
    e[0] = 1.0
    out = adapt(T.constant(e), _consts({"W1": W1, "b1": np.zeros(4), "W2": W2, "b2": b2}))
    assert out["shared"][0].data[0, 0] == 1 + 0.5 * math.tanh(0.5)
    assert out["shared"][1].data[0, 0] == 3.0
    assert out["micro"][0].data[1, 1] == 1 + 0.5 * math.tanh(-2.0)
    assert out["macro"][1].data[0, 1] == 0.7
    assert out["macro"][0].data[0, 1] == 1.0


def test_film_examples():
    W = T.constant([[1.0, 2.0], [3.0, 4.0]])
    # a single block, then the same block tiled over the four gates
    got = W * T.constant([[2.0, 2.0], [2.0, 2.0]]) + T.constant([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(got.data, [[3, 4], [6, 9]])
    Wfull = T.constant(np.tile([[1.0, 2.0], [3.0, 4.0]], (1, 4)))
    out = film(Wfull, T.constant(np.full((2, 2), 2.0)), T.constant(np.eye(2)))
    np.testing.assert_array_equal(out.data, np.tile([[3, 4], [6, 9]], (1, 4)))


def test_film_zero_gamma_gives_beta():
    rng = np.random.default_rng(0)
    W = T.constant(rng.normal(size=(3, 12)))
    B = rng.normal(size=(3, 3))
    out = film(W, T.constant(np.zeros((3, 3))), T.constant(B))
    np.testing.assert_array_equal(out.data, np.tile(B, (1, 4)))


def test_customize_identity_is_exact_and_leaves_input_alone():
    _, xs, xd, enc = _setup()
    before = {k: v.data.copy() for k, v in enc.items()}
    ident = {b: (T.constant(np.ones((3, 3))), T.constant(np.zeros((3, 3)))) for b in BRANCHES}
    custom = customize(enc, ident)
    for b in BRANCHES:
        np.testing.assert_array_equal(custom[b].data, enc[f"{b}_W_hh"].data)
    a = encode([0, 3, 1], xs, xd, enc)
    c = encode_customized([0, 3, 1], xs, xd, enc, ident)
    np.testing.assert_array_equal(a.h_sm.data, c.h_sm.data)
    np.testing.assert_array_equal(a.h_sp.data, c.h_sp.data)
    for k, v in enc.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_zero_initialized_adaptor_two_pass_is_exact_identity():
    rng, xs, xd, enc = _setup()
    adaptor = _consts(init_adaptor(3, rng))
    for _ in range(10):
        seq = rng.choice(6, size=int(rng.integers(1, 6)), replace=False).tolist()
        first, _, custom = two_pass(seq, xs, xd, enc, adaptor)
        np.testing.assert_array_equal(first.h_sm.data, custom.h_sm.data)
        np.testing.assert_array_equal(first.h_sp.data, custom.h_sp.data)


def test_different_film_params_change_outputs():
    rng, xs, xd, enc = _setup()
    p1 = {b: (T.constant(rng.uniform(0.5, 1.5, (3, 3))), T.constant(rng.normal(0, 0.3, (3, 3)))) for b in BRANCHES}
    p2 = {b: (T.constant(rng.uniform(0.5, 1.5, (3, 3))), T.constant(rng.normal(0, 0.3, (3, 3)))) for b in BRANCHES}
    a = encode_customized([1, 2, 3], xs, xd, enc, p1)
    b = encode_customized([1, 2, 3], xs, xd, enc, p2)
    assert not np.array_equal(a.h_sm.data, b.h_sm.data)


def test_adaptor_only_sees_prefix():
    rng, xs, xd, enc = _setup()
    ad = init_adaptor(3, rng)
    ad["W2"] = rng.normal(0, 0.2, ad["W2"].shape)
    ad = _consts(ad)
    _, pa, ca = two_pass([0, 1, 2, 3], xs, xd, enc, ad, n_summary=2)
    _, pb, cb = two_pass([0, 1, 5, 4], xs, xd, enc, ad, n_summary=2)
    for br in BRANCHES:
        np.testing.assert_array_equal(pa[br][0].data, pb[br][0].data)
    np.testing.assert_array_equal(ca.h_sp.data[:2], cb.h_sp.data[:2])
    assert not np.array_equal(ca.h_sp.data[2:], cb.h_sp.data[2:])


def test_gamma_bounded():
    rng, _, _, _ = _setup()
    ad = {"W1": rng.normal(size=(12, 6)), "b1": rng.normal(size=6),
          "W2": rng.normal(0, 10, size=(6, 54)), "b2": rng.normal(size=54)}
    out = adapt(T.constant(rng.normal(size=12)), _consts(ad))
    for g, _ in out.values():
        assert np.all(g.data >= 0.5) and np.all(g.data <= 1.5)
