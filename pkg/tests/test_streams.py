from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import gapl.tensor as T
from gapl.contextual import (attention, contextual_anchor, contextual_anchors, ctx_branch_scores, ctx_log_probs,
                             ctx_probs, init_contextual, score_map)
from gapl.errors import ContractError, DegenerateInputError, ResourceGuardError
from gapl.gradcheck import finite_diff_check
from gapl.gram import gate_features, gram_descriptor, gram_logits, style_anchor, style_gate
from gapl.nn import init_mlp
from gapl.tensor import Tensor
from gapl.text import ClassTextBank, fuse_text, global_logits, global_probs

from oracles import attention_explicit, cos, mlp_forward, sigmoid, softmax_naive, topk_mean_sort


def bank(w_learn, w_fixed, alpha=0.7):
    return ClassTextBank(Tensor(np.asarray(w_fixed, float)), Tensor(np.asarray(w_learn, float), requires_grad=True,
                                                                      name="text.w_learn"), alpha)


# global stream


def test_fuse_text_endpoints():
    rng = np.random.default_rng(0)
    wl, wf = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    assert np.array_equal(fuse_text(bank(wl, wf, 1.0), "infer").data, wl)
    assert np.array_equal(fuse_text(bank(wl, wf, 0.0), "infer").data, wf)
    assert np.array_equal(fuse_text(bank(wl, wf, 0.3), "train").data, wl)


def test_fuse_text_default_alpha():
    w = fuse_text(bank([[1.0, 0.0]], [[0.0, 1.0]]), "infer").data
    np.testing.assert_allclose(w, [[0.7, 0.3]], atol=1e-15)


def test_fuse_text_alpha_rows():
    wl, wf = np.ones((2, 2)), np.zeros((2, 2)) + 3
    w = fuse_text(bank(wl, wf, 0.5), "infer", alpha_rows=np.array([0.5, 0.0])).data
    assert np.array_equal(w, [[2.0, 2.0], [3.0, 3.0]])


@given(st.floats(0, 1), st.floats(-3, 3), st.integers(0, 1000))
def test_fuse_text_linear(alpha, c, seed):
    rng = np.random.default_rng(seed)
    wl, wf, wl2, wf2 = (rng.standard_normal((3, 2)) for _ in range(4))
    lhs = fuse_text(bank(wl + c * wl2, wf + c * wf2, alpha), "infer").data
    rhs = fuse_text(bank(wl, wf, alpha), "infer").data + c * fuse_text(bank(wl2, wf2, alpha), "infer").data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_global_two_class_orthogonal():
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = global_probs(np.array([1.0, 0.0]), Tensor(w), 1.0).data
    np.testing.assert_allclose(p, [math.e / (math.e + 1), 1 / (math.e + 1)], atol=1e-15)


def test_global_identical_classes_uniform():
    w = np.tile([0.3, -1.0, 2.0], (5, 1))
    np.testing.assert_allclose(global_probs(np.array([1.0, 2.0, 3.0]), Tensor(w), 0.01).data, [0.2] * 5, atol=1e-15)


def test_global_logits_oracle():
    rng = np.random.default_rng(4)
    f, w = rng.standard_normal(16), rng.standard_normal((5, 16))
    want = [cos(f, w[c]) / 0.07 for c in range(5)]
    np.testing.assert_allclose(global_logits(f, Tensor(w), 0.07).data, want, rtol=0, atol=1e-12)


def test_global_zero_class_row_named():
    w = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(DegenerateInputError, match="class at index 1"):
        global_logits(np.array([1.0, 1.0]), Tensor(w), 1.0)


@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_global_scale_invariance(c, seed):
    rng = np.random.default_rng(seed)
    f, w = rng.standard_normal(6), Tensor(rng.standard_normal((4, 6)))
    np.testing.assert_allclose(global_logits(c * f, w, 0.01).data, global_logits(f, w, 0.01).data, atol=1e-10)


def test_zero_shot_argmax_ignores_w_learn_at_alpha_zero():
    rng = np.random.default_rng(6)
    wf, f = rng.standard_normal((5, 8)), rng.standard_normal((20, 8))
    preds = [np.argmax(global_logits(f, fuse_text(bank(rng.standard_normal((5, 8)), wf, 0.0), "infer"), 0.01).data, 1)
             for _ in range(3)]
    assert all(np.array_equal(preds[0], p) for p in preds)


def _ce_global(b, f, y, mode):
    w = fuse_text(b, mode)
    logp = T.log_softmax(global_logits(f, w, 0.5))
    return T.scale(T.sum(logp[np.arange(len(y)), y]), -1.0 / len(y))


def test_global_ce_gradient_train_mode_and_alpha_ratio():
    rng = np.random.default_rng(2)
    wl, wf = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    f, y = rng.standard_normal((6, 5)), rng.integers(0, 4, 6)
    b = bank(wl.copy(), wf, 0.7)
    g_train = T.backward(_ce_global(b, f, y, "train"), {"text.w_learn": b.w_learn})["text.w_learn"]

    def loss(v):
        with T.no_grad():
            return _ce_global(bank(v["w"], wf, 0.7), f, y, "train").item()

    assert finite_diff_check({"w": wl.copy()}, loss, {"w": g_train}).passed

    # in infer mode the learned block enters scaled by alpha; with alpha=0.7 at a point where the
    # blended bank equals w_learn of the train-mode evaluation, the gradient is alpha times as large
    wl_infer = (wl - 0.3 * wf) / 0.7
    b2 = bank(wl_infer, wf, 0.7)
    g_infer = T.backward(_ce_global(b2, f, y, "infer"), {"text.w_learn": b2.w_learn})["text.w_learn"]
    np.testing.assert_allclose(g_infer, 0.7 * g_train, rtol=1e-8, atol=1e-14)


# gram stream


def test_gram_diag_orthonormal_rows():
    d = gram_descriptor(np.eye(2)[None])
    assert np.array_equal(d.g_diag.data, [[0.5, 0.5]])


def test_gram_zero_input():
    d = gram_descriptor(np.zeros((3, 4)), "diag+var")
    assert np.array_equal(d.g_diag.data, np.zeros(4))
    assert np.array_equal(d.var.data, np.zeros(4))


def test_gram_diag_explicit_oracle_seed7():
    F = np.random.default_rng(7).standard_normal((6, 4))
    np.testing.assert_allclose(gram_descriptor(F).g_diag.data, np.diag(F.T @ F / 6), rtol=0, atol=1e-12)


def test_gram_full_matches_explicit():
    F = np.random.default_rng(1).standard_normal((2, 5, 3))
    desc = gram_descriptor(F, "full")
    for b in range(2):
        np.testing.assert_allclose(desc.g_full.data[b], (F[b].T @ F[b] / 5).reshape(-1), atol=1e-14)


def test_gram_full_guard():
    with pytest.raises(ResourceGuardError):
        gram_descriptor(np.ones((2, 65)), "full", full_limit=64)


def test_gram_diag_never_allocates_d_by_d():
    d, N = 40, 6  # d > N so any d x d intermediate is the largest possible allocation
    rng = np.random.default_rng(0)
    params = init_mlp(rng, "gate", d, 10, d)
    sizes = []
    F = Tensor(rng.standard_normal((3, N, d)), requires_grad=True, name="F")
    with T.allocation_hook(lambda shape: sizes.append(shape)):
        desc = gram_descriptor(F, "diag")
        gamma = style_gate(desc, params)
        T.backward(T.sum(gamma), {"F": F})
    assert sizes, "hook saw no allocations"
    assert all(not (len(s) >= 2 and s[-1] == d and s[-2] == d) for s in sizes), sizes
    assert max(int(np.prod(s)) for s in sizes) < d * d


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_energy_covariance_exact_eps_term(c):
    # the shift is 2 ln c plus log(1 + eps (1 - c^2) / (c^2 (g + eps))), exactly
    F = np.random.default_rng(3).standard_normal((8, 5)) + 2.0
    eps = 1e-6
    g = gram_descriptor(F).g_diag.data
    x0 = gate_features(gram_descriptor(F), eps).data
    x1 = gate_features(gram_descriptor(c * F), eps).data
    correction = np.log1p(eps * (1 - c * c) / (c * c * (g + eps)))
    np.testing.assert_allclose(x1 - x0, 2 * math.log(c) + correction, rtol=0, atol=1e-12)
    assert np.max(np.abs(x1 - x0 - 2 * math.log(c))) <= eps * abs(1 - c ** -2) / g.min() * 1.01


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_energy_covariance_two_log_c(c):
    F = np.random.default_rng(3).standard_normal((8, 5)) + 2.0
    eps = 1e-13
    assert gram_descriptor(F).g_diag.data.min() >= 1e3 * eps
    x0 = gate_features(gram_descriptor(F), eps).data
    x1 = gate_features(gram_descriptor(c * F), eps).data
    assert np.max(np.abs(x1 - x0 - 2 * math.log(c))) < 1e-8


def test_gate_zero_last_layer_is_half():
    params = init_mlp(np.random.default_rng(0), "gate", 5, 8, 5)
    F = np.random.default_rng(1).standard_normal((4, 7, 5))
    assert np.array_equal(style_gate(gram_descriptor(F), params).data, np.full((4, 5), 0.5))


def test_gate_saturates():
    params = init_mlp(np.random.default_rng(0), "gate", 3, 4, 3)
    params["gate.fc2.bias"].data = np.full(3, 20.0)
    gamma = style_gate(gram_descriptor(np.ones((2, 3))), params).data
    assert np.max(np.abs(gamma - 1.0)) < 1e-8


def test_gate_forward_oracle_unit_energy():
    rng = np.random.default_rng(12)
    params = init_mlp(rng, "gate", 6, 4, 6, zero_last=False)
    params["gate.fc1.bias"].data = rng.standard_normal(4)
    params["gate.fc2.bias"].data = rng.standard_normal(6)
    F = np.ones((3, 6))  # g_diag = 1
    got = style_gate(gram_descriptor(F), params, eps=1e-6).data
    x = np.log(np.ones(6) + 1e-6)
    want = sigmoid(mlp_forward(x, *(params[f"gate.{k}"].data for k in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"))))
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_gate_shape_mismatch():
    params = init_mlp(np.random.default_rng(0), "gate", 4, 4, 4)
    with pytest.raises(ContractError):
        style_gate(gram_descriptor(np.ones((2, 3))), params)


def test_style_anchor_examples():
    w = Tensor(np.array([[1.0, 2.0], [3.0, -1.0]]))
    assert np.array_equal(style_anchor(w, np.zeros(2)).data, w.data)
    assert np.array_equal(style_anchor(w, np.ones(2)).data, 2 * w.data)
    assert np.array_equal(style_anchor(Tensor([[1.0, 2.0]]), np.array([0.5, 0.25])).data, [[1.5, 2.5]])


@given(st.floats(0.001, 0.999), st.integers(0, 1000))
def test_uniform_gate_reproduces_global_logits(g, seed):
    rng = np.random.default_rng(seed)
    f, w = rng.standard_normal(7), Tensor(rng.standard_normal((4, 7)))
    a = style_anchor(w, np.full(7, g))
    np.testing.assert_allclose(gram_logits(f, a, 0.01).data, global_logits(f, w, 0.01).data, atol=1e-10)


def test_gram_single_class():
    p = T.softmax(gram_logits(np.array([1.0, 2.0]), Tensor([[3.0, -1.0]]), 0.01)).data
    assert np.array_equal(p, [1.0])


def test_gram_zero_anchor():
    with pytest.raises(DegenerateInputError, match="style anchor"):
        gram_logits(np.ones(2), Tensor(np.array([[1.0, 0.0], [0.0, 0.0]])), 1.0)


def test_gram_stream_composed_oracle():
    rng = np.random.default_rng(21)
    d, N, M = 6, 5, 4
    params = init_mlp(rng, "gate", d, 8, d, zero_last=False)
    F = rng.standard_normal((N, d))
    f = F.mean(axis=0)
    w = rng.standard_normal((M, d))
    gamma = style_gate(gram_descriptor(F), params)
    got = gram_logits(f, style_anchor(Tensor(w), gamma), 0.05).data
    g_diag = [sum(F[n, j] ** 2 for n in range(N)) / N for j in range(d)]
    gam = sigmoid(mlp_forward(np.log(np.array(g_diag) + 1e-6),
                              *(params[f"gate.{k}"].data for k in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"))))
    want = [cos(f, w[c] * (1 + gam)) / 0.05 for c in range(M)]
    np.testing.assert_allclose(got.reshape(-1), want, rtol=0, atol=1e-12)


@pytest.mark.parametrize("mode", ["diag", "diag+var", "full"])
def test_gram_path_gradients(mode):
    rng = np.random.default_rng(5)
    d, N, M = 4, 5, 3
    n_in = {"diag": d, "diag+var": 2 * d, "full": d * d}[mode]
    params = init_mlp(rng, "gate", n_in, 6, d, zero_last=False)
    params["gate.fc1.bias"].data = rng.uniform(0.5, 1.0, 6)  # keep hidden units away from the kink
    F = rng.standard_normal((2, N, d)) + 1.0
    f = F.mean(axis=1)
    w = Tensor(rng.standard_normal((M, d)), requires_grad=True, name="w")
    y = np.array([0, 2])
    allp = {**params, "w": w}

    def objective(p):
        gamma = style_gate(gram_descriptor(F, mode), p, 1e-6)
        z = gram_logits(f, style_anchor(p["w"], gamma), 0.5)
        return T.scale(T.sum(T.log_softmax(z)[np.arange(2), y]), -1.0)

    ad = T.backward(objective(allp), allp)

    def loss(vals):
        with T.no_grad():
            return objective({k: Tensor(v) for k, v in vals.items()}).item()

    rep = finite_diff_check({k: v.data.copy() for k, v in allp.items()}, loss, ad)
    assert rep.passed, rep


# contextual stream


def _ctx_params(seed, d=8, K=2, P=3, hidden=6, zero_last=True):
    rng = np.random.default_rng(seed)
    params = init_contextual(rng, d, K, P, hidden)
    if not zero_last:
        params["ctx.out.fc2.weight"].data = rng.standard_normal(params["ctx.out.fc2.weight"].shape) * 0.3
        params["ctx.out.fc2.bias"].data = rng.standard_normal(d) * 0.1
    return params


def test_single_token_attention_is_value_projection():
    params = _ctx_params(0, P=1)
    w = Tensor(np.random.default_rng(1).standard_normal((5, 8)))
    att = attention(w, params).data
    v = params["ctx.signals"].data[:, 0] @ params["ctx.attn.v"].data
    for k in range(2):
        np.testing.assert_allclose(att[k], np.tile(v[k], (5, 1)), atol=1e-15)


def test_zero_output_network_gives_text_anchor():
    params = _ctx_params(2)
    w = Tensor(np.random.default_rng(3).standard_normal((4, 8)))
    for k in (1, 2):
        assert np.array_equal(contextual_anchor(w, params, k).data, w.data)


def test_attention_explicit_oracle_seed9():
    params = _ctx_params(9, d=8, K=2, P=3)
    w = np.random.default_rng(10).standard_normal((4, 8))
    want = attention_explicit(w, params["ctx.signals"].data, params["ctx.attn.q"].data, params["ctx.attn.k"].data,
                              params["ctx.attn.v"].data)
    np.testing.assert_allclose(attention(Tensor(w), params).data, want, rtol=0, atol=1e-12)


def test_contextual_anchor_branch_range():
    with pytest.raises(ContractError):
        contextual_anchor(Tensor(np.ones((2, 8))), _ctx_params(0), 3)


def test_score_map_self_and_orthogonal():
    F = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [1.0, 1.0, 0.0]])
    s = score_map(Tensor([[0.0, 3.0, 0.0]]), F).data
    assert s[0, 1] == 1.0
    s = score_map(Tensor([[0.0, 0.0, 1.0]]), F).data
    assert np.array_equal(s, np.zeros((1, 3)))


def test_score_map_pairwise_oracle():
    rng = np.random.default_rng(14)
    a, F = rng.standard_normal((2, 3, 5)), rng.standard_normal((4, 6, 5))
    got = score_map(Tensor(a), F).data
    assert got.shape == (4, 2, 3, 6)
    for b in range(4):
        for k in range(2):
            for c in range(3):
                for n in range(6):
                    assert abs(got[b, k, c, n] - cos(a[k, c], F[b, n])) <= 1e-12


def test_score_map_zero_patch_named():
    F = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(DegenerateInputError, match="patch at index 1"):
        score_map(Tensor([[1.0, 1.0]]), F)


def test_branch_pool_clamped_to_plain_mean():
    s = np.random.default_rng(0).uniform(-1, 1, (1, 3, 4))
    got = ctx_branch_scores(Tensor(s), [min(10, 4)]).data
    np.testing.assert_allclose(got, s.mean(axis=-1), atol=1e-15)


def test_branch_pool_top_two():
    row = np.zeros(20)
    row[:4] = [0.9, 0.1, 0.5, 0.7]
    got = ctx_branch_scores(Tensor(row.reshape(1, 1, 20)), [2]).data
    assert got[0, 0] == pytest.approx(0.8, abs=1e-15)


def test_branch_pool_sort_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        K, M, N = 3, 4, int(rng.integers(2, 30))
        s = rng.uniform(-1, 1, (K, M, N))
        pools = [int(rng.integers(1, N + 1)) for _ in range(K)]
        got = ctx_branch_scores(Tensor(s), pools).data
        for k in range(K):
            for c in range(M):
                assert abs(got[k, c] - topk_mean_sort(list(s[k, c]), pools[k])) <= 1e-12


def test_ctx_probs_single_branch():
    s = np.random.default_rng(0).uniform(-1, 1, (1, 5))
    np.testing.assert_allclose(ctx_probs(Tensor(s), 0.1).data, softmax_naive(s[0], 0.1), atol=1e-15)


def test_ctx_probs_identical_branches():
    s = np.tile(np.random.default_rng(0).uniform(-1, 1, 5), (4, 1))
    np.testing.assert_allclose(ctx_probs(Tensor(s), 0.1).data, softmax_naive(s[0], 0.1), atol=1e-15)


def test_ctx_probs_composed_oracle():
    s = np.random.default_rng(8).uniform(-1, 1, (4, 5))
    want = np.mean([softmax_naive(s[k], 0.2) for k in range(4)], axis=0)
    np.testing.assert_allclose(ctx_probs(Tensor(s), 0.2).data, want, rtol=0, atol=1e-12)
    np.testing.assert_allclose(ctx_log_probs(Tensor(s), 0.2).data, np.log(want), rtol=0, atol=1e-12)


def test_ctx_log_probs_no_underflow():
    s = np.array([[1.0, -1.0], [1.0, -1.0]])
    lp = ctx_log_probs(Tensor(s), 1e-4).data
    assert np.isfinite(lp).all()
    assert lp[1] == pytest.approx(-2e4, rel=1e-12)


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_ctx_scale_invariance(c):
    params = _ctx_params(4, zero_last=False)
    rng = np.random.default_rng(5)
    w, F = Tensor(rng.standard_normal((3, 8))), rng.standard_normal((2, 12, 8))
    a = contextual_anchors(w, params)
    s0, s1 = score_map(a, F).data, score_map(a, c * F).data
    np.testing.assert_allclose(s0, s1, atol=1e-10)
    p0 = ctx_probs(ctx_branch_scores(Tensor(s0), [10, 12]), 0.01).data
    p1 = ctx_probs(ctx_branch_scores(Tensor(s1), [10, 12]), 0.01).data
    np.testing.assert_allclose(p0, p1, atol=1e-10)


def test_zero_output_network_branches_coincide():
    params = _ctx_params(6)
    rng = np.random.default_rng(7)
    w, F = rng.standard_normal((3, 8)), rng.standard_normal((5, 8))
    s = score_map(contextual_anchors(Tensor(w), params), F).data
    for k in range(2):
        for c in range(3):
            np.testing.assert_allclose(s[k, c], [cos(w[c], F[n]) for n in range(5)], atol=1e-12)


def test_contextual_gradients():
    d, K, P, M, N = 6, 2, 3, 3, 7
    params = _ctx_params(11, d=d, K=K, P=P, hidden=5, zero_last=False)
    params["ctx.out.fc1.bias"].data = np.full(5, 0.7)
    rng = np.random.default_rng(12)
    w = Tensor(rng.standard_normal((M, d)), requires_grad=True, name="w")
    F = rng.standard_normal((2, N, d))
    y = np.array([1, 0])
    allp = {**params, "w": w}
    pools = [3, 6]

    def objective(p):
        s = score_map(contextual_anchors(p["w"], p), F)
        lp = ctx_log_probs(ctx_branch_scores(s, pools), 0.3)
        return T.scale(T.sum(lp[np.arange(2), y]), -1.0)

    ad = T.backward(objective(allp), allp)
    s = score_map(contextual_anchors(w, params), F).data
    srt = -np.sort(-s, axis=-1)
    for k, m in enumerate(pools):
        assert np.min(srt[:, k, :, m - 1] - srt[:, k, :, m]) >= 1e-3  # stable top-k sets under h

    def loss(vals):
        with T.no_grad():
            return objective({k: Tensor(v) for k, v in vals.items()}).item()

    rep = finite_diff_check({k: v.data.copy() for k, v in allp.items()}, loss, ad)
    assert rep.passed, rep
