import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgr import trm
from cgr.numerics import Tensor, grad_check, layer_norm, relu, scaled_dot_attention


def P(d=8, n_blocks=1, seed=0):
    return {k: Tensor(v) for k, v in trm.init_params(np.random.default_rng(seed), d, n_blocks).items()}


def test_enhance_shapes(rng):
    p = P()
    img, a, c = trm.enhance(Tensor(rng.standard_normal((12, 8))), Tensor(rng.standard_normal((1, 8))), Tensor(rng.standard_normal((2, 8))), p, heads=2)
    assert (img.shape, a.shape, c.shape) == ((12, 8), (1, 8), (2, 8))


def test_enhance_zero_attention_is_identity(rng):
    p = P()
    for k in p:
        if k.startswith("trm.enh"):
            p[k] = Tensor(np.zeros_like(p[k].data))
    p["trm.in_img.w"] = Tensor(np.eye(8))
    p["trm.in_txt.w"] = Tensor(np.eye(8))
    x, a, c = rng.standard_normal((6, 8)), rng.standard_normal((1, 8)), rng.standard_normal((3, 8))
    img, A, C = trm.enhance(Tensor(x), Tensor(a), Tensor(c), p, heads=2)
    np.testing.assert_array_equal(img.data, x)
    np.testing.assert_array_equal(A.data, a)
    np.testing.assert_array_equal(C.data, c)


def test_enhance_single_token_text_is_copy_plus_residual(rng):
    p = P()
    a = rng.standard_normal((1, 8))
    x_a = a @ p["trm.in_txt.w"].data + p["trm.in_txt.b"].data
    _, A, _ = trm.enhance(Tensor(rng.standard_normal((4, 8))), Tensor(a), Tensor(rng.standard_normal((2, 8))), p, heads=2)
    v = x_a @ p["trm.enh_txt.wv"].data
    np.testing.assert_allclose(A.data, x_a + v @ p["trm.enh_txt.wo"].data, atol=1e-13)


def fuse_oracle(F_I, F_a, F_c, p):
    """Eqs. as written, in plain numpy: query projections double as keys."""
    W = [p[f"trm.fuse.w{i}"].data for i in range(1, 5)]
    F_T = np.vstack([F_a, F_c])
    iq, iv, tq, tv = F_I @ W[0], F_I @ W[1], F_T @ W[2], F_T @ W[3]
    d = F_I.shape[1]

    def sm(x):
        e = np.exp(x - x.max(1, keepdims=True))
        return e / e.sum(1, keepdims=True)

    I = F_I + sm(iq @ tq.T / math.sqrt(d)) @ tv
    T = F_T + sm(tq @ iq.T / math.sqrt(d)) @ iv
    return I, T[: len(F_a)], T[len(F_a) :]


def test_fuse_matches_oracle(rng):
    p = P()
    F_I, F_a, F_c = rng.standard_normal((9, 8)), rng.standard_normal((1, 8)), rng.standard_normal((2, 8))
    f = trm.bidirectional_fuse(Tensor(F_I), Tensor(F_a), Tensor(F_c), p)
    I, Ta, Tc = fuse_oracle(F_I, F_a, F_c, p)
    np.testing.assert_allclose(f.I.data, I, atol=1e-13)
    np.testing.assert_allclose(f.T_a.data, Ta, atol=1e-13)
    np.testing.assert_allclose(f.T_c.data, Tc, atol=1e-13)
    assert f.T_a.shape[0] == 1 and f.T_c.shape[0] == 2


def test_fuse_single_key_case(rng):
    p = P()
    F_I, F_a, F_c = rng.standard_normal((1, 8)), rng.standard_normal((1, 8)), rng.standard_normal((1, 8))
    f = trm.bidirectional_fuse(Tensor(F_I), Tensor(F_a), Tensor(F_c), p)
    # one image token: each text row attends to it alone
    np.testing.assert_allclose(f.T_a.data, F_a + F_I @ p["trm.fuse.w2"].data, atol=1e-13)


def test_fuse_attention_rows_sum_to_one(rng):
    p = P()
    F_I, F_T = rng.standard_normal((9, 8)), rng.standard_normal((3, 8))
    _, w = scaled_dot_attention(Tensor(F_I @ p["trm.fuse.w1"].data), Tensor(F_T @ p["trm.fuse.w3"].data), Tensor(F_T), return_weights=True)
    assert np.abs(np.asarray(w).sum(-1) - 1).max() < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 20), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_fuse_permutation(n, n_a, n_c, seed):
    r = np.random.default_rng(seed)
    p = P(seed=seed % 7)
    F_I, F_a, F_c = r.standard_normal((n, 8)), r.standard_normal((n_a, 8)), r.standard_normal((n_c, 8))
    perm = r.permutation(n)
    a = trm.bidirectional_fuse(Tensor(F_I), Tensor(F_a), Tensor(F_c), p)
    b = trm.bidirectional_fuse(Tensor(F_I[perm]), Tensor(F_a), Tensor(F_c), p)
    np.testing.assert_allclose(b.I.data, a.I.data[perm], atol=1e-12)
    np.testing.assert_allclose(b.T_a.data, a.T_a.data, atol=1e-12)
    np.testing.assert_allclose(b.T_c.data, a.T_c.data, atol=1e-12)


def test_selection_full_and_dominance(rng):
    I, Ta, Tc = rng.standard_normal((10, 8)), rng.standard_normal((1, 8)), rng.standard_normal((2, 8))
    qs = trm.select_queries_and_groups(Tensor(I), Tensor(Ta), Tensor(Tc), 10, 3)
    s = (I @ Ta.T).max(1)
    assert qs.obj_idx == list(np.argsort(-s, kind="stable"))
    np.testing.assert_array_equal(qs.O.data, I[qs.obj_idx])
    qs = trm.select_queries_and_groups(Tensor(I), Tensor(Ta), Tensor(Tc), 4, 3)
    rest = np.setdiff1d(np.arange(10), qs.obj_idx)
    assert s[qs.obj_idx].min() >= s[rest].max()
    sc = (I @ Tc.T).max(1)
    np.testing.assert_allclose(qs.group_scores, sc)
    np.testing.assert_array_equal(qs.G.data, I[qs.group_idx])


def test_selection_planted_row_first(rng):
    I, Ta = rng.standard_normal((10, 8)), rng.standard_normal((1, 8))
    I[6] = 10 * Ta[0]
    qs = trm.select_queries_and_groups(Tensor(I), Tensor(Ta), Tensor(Ta), 3, 2)
    assert qs.obj_idx[0] == 6


def test_selection_identical_texts_share_indices(rng):
    I, T = rng.standard_normal((10, 8)), rng.standard_normal((2, 8))
    qs = trm.select_queries_and_groups(Tensor(I), Tensor(T), Tensor(T), 5, 3)
    assert qs.obj_idx[:3] == qs.group_idx


def test_selection_errors(rng):
    I, T = Tensor(rng.standard_normal((4, 8))), Tensor(rng.standard_normal((1, 8)))
    with pytest.raises(ValueError):
        trm.select_queries_and_groups(I, T, T, 5, 2)
    with pytest.raises(ValueError):
        trm.select_queries_and_groups(I, T, T, 2, 3)


def test_selection_logits_monotone_in_scores(rng):
    p = P()
    I, Ta = rng.standard_normal((10, 8)), rng.standard_normal((2, 8))
    s = (I @ Ta.T).max(1)
    z = trm.selection_logits(Tensor(I), Tensor(Ta), p).data.ravel()
    assert list(np.argsort(-z, kind="stable")) == list(np.argsort(-s, kind="stable"))


def test_decode_shapes(rng):
    for k_o, k_g, nb in ((5, 2, 1), (7, 7, 2), (3, 1, 3)):
        p = P(n_blocks=nb)
        o, g = trm.group_decode(Tensor(rng.standard_normal((k_o, 8))), Tensor(rng.standard_normal((k_g, 8))), Tensor(rng.standard_normal((1, 8))), Tensor(rng.standard_normal((9, 8))), p, nb, heads=2)
        assert o.shape == (k_o, 8) and g.shape == (k_g, 8)
    with pytest.raises(ValueError):
        trm.group_decode(Tensor(np.zeros((2, 8))), Tensor(np.zeros((1, 8))), Tensor(np.zeros((1, 8))), Tensor(np.zeros((3, 8))), P(), 0)


def test_decode_zero_values_reduce_to_feed_forward(rng):
    p = P()
    for k in list(p):
        if k.endswith(".wv"):
            p[k] = Tensor(np.zeros_like(p[k].data))
    O_, G_ = rng.standard_normal((4, 8)), rng.standard_normal((2, 8))
    o, g = trm.group_decode(Tensor(O_), Tensor(G_), Tensor(rng.standard_normal((1, 8))), Tensor(rng.standard_normal((9, 8))), p, 1, heads=2)
    x = Tensor(np.vstack([O_, G_]))

    def ln(t, name):
        return layer_norm(t, p[f"{name}.g"], p[f"{name}.b"])

    h = relu(ln(x, "trm.dec0.ln4") @ p["trm.dec0.ffn.w1"] + p["trm.dec0.ffn.b1"])
    y = ln(x + (h @ p["trm.dec0.ffn.w2"] + p["trm.dec0.ffn.b2"]), "trm.dec_out").data
    np.testing.assert_allclose(o.data, y[:4], atol=1e-13)
    np.testing.assert_allclose(g.data, y[4:], atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 8), st.integers(1, 4), st.integers(1, 2), st.integers(0, 2**31 - 1))
def test_decode_object_permutation(k_o, k_g, nb, seed):
    r = np.random.default_rng(seed)
    p = P(n_blocks=nb, seed=seed % 5)
    O_, G_ = r.standard_normal((k_o, 8)), r.standard_normal((k_g, 8))
    Ta, I = r.standard_normal((2, 8)), r.standard_normal((9, 8))
    perm = r.permutation(k_o)
    o1, g1 = trm.group_decode(Tensor(O_), Tensor(G_), Tensor(Ta), Tensor(I), p, nb, heads=2)
    o2, g2 = trm.group_decode(Tensor(O_[perm]), Tensor(G_), Tensor(Ta), Tensor(I), p, nb, heads=2)
    np.testing.assert_allclose(o2.data, o1.data[perm], atol=1e-11)
    np.testing.assert_allclose(g2.data, g1.data, atol=1e-11)


def test_end_to_end_trm_gradient(rng):
    """enhance -> fuse -> select -> decode with the selection held at a margin-safe point."""
    p = trm.init_params(rng, 8, 1)
    pt = {k: v for k, v in p.items() if not k.startswith("trm.sel")}
    F_I, F_a, F_c = rng.standard_normal((12, 8)), rng.standard_normal((1, 8)), rng.standard_normal((2, 8))
    R = rng.standard_normal((7, 8))

    def run(t):
        img, a, c = trm.enhance(Tensor(F_I), Tensor(F_a), Tensor(F_c), t, heads=2)
        f = trm.bidirectional_fuse(img, a, c, t)
        return f, trm.select_queries_and_groups(f.I, f.T_a, f.T_c, 5, 2)

    f, qs = run({k: Tensor(v) for k, v in pt.items()})
    for s, k in ((qs.obj_scores, 5), (qs.group_scores, 2)):
        v = np.sort(s)[::-1]
        assert v[k - 1] - v[k] > 1e-3, "pick another seed: selection is not margin-safe"

    def loss(t):
        f, qs = run(t)
        o, g = trm.group_decode(qs.O, qs.G, f.T_a, f.I, t, 1, heads=2)
        from cgr.numerics import concat_rows, tsum

        return tsum(concat_rows(o, g) * Tensor(R))

    rep = grad_check(loss, pt, tol=1e-3, max_coords=6, rng=rng)
    assert rep.passed, str(rep)
