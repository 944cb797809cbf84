"""Contextual-anchored stream: text queries attend to learnable local signals,
anchors are matched against patch tokens and pooled over the top-scoring patches."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import init_mlp, mlp
from .tensor import Tensor


def init_contextual(rng: np.random.Generator, d: int, K: int, P: int, hidden: int) -> dict[str, Tensor]:
    def p(name, arr):
        return Tensor(arr, requires_grad=True, name=name)

    params = {
        "ctx.signals": p("ctx.signals", rng.standard_normal((K, P, d)) / np.sqrt(d)),
        "ctx.attn.q": p("ctx.attn.q", rng.standard_normal((d, d)) / np.sqrt(d)),
        "ctx.attn.k": p("ctx.attn.k", rng.standard_normal((d, d)) / np.sqrt(d)),
        "ctx.attn.v": p("ctx.attn.v", rng.standard_normal((d, d)) / np.sqrt(d)),
    }
    params.update(init_mlp(rng, "ctx.out", d, hidden, d))
    return params


def attention(w: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Single-head attention of class queries over each branch's signal tokens.

    Returns (K, M, d): for branch k and class c, the softmax-over-tokens
    weighted sum of value projections.
    """
    signals = params["ctx.signals"]
    d = w.shape[-1]
    q = w @ params["ctx.attn.q"]  # (M, d)
    keys = signals @ params["ctx.attn.k"]  # (K, P, d)
    values = signals @ params["ctx.attn.v"]
    logits = T.scale(q @ T.swap_last(keys), 1.0 / math.sqrt(d))  # (K, M, P)
    return T.softmax(logits, axis=-1) @ values


def contextual_anchors(w: Tensor, params: dict[str, Tensor]) -> Tensor:
    """All contextual anchors, (K, M, d): w_c plus the output network on the attended value."""
    return w + mlp(attention(w, params), params, "ctx.out")


def contextual_anchor(w: Tensor, params: dict[str, Tensor], k: int) -> Tensor:
    """Anchors of branch ``k`` (1-based), (M, d)."""
    K = params["ctx.signals"].shape[0]
    if not 1 <= k <= K:
        raise ContractError(f"branch {k} outside [1, {K}]")
    return contextual_anchors(w, params)[k - 1]


def score_map(anchors: Tensor, F: Tensor) -> Tensor:
    """Cosine of every anchor with every patch.

    ``anchors`` (..A, d) against ``F`` (B.., N, d) gives (B.., ..A, N), e.g.
    (K, M, d) x (B, N, d) -> (B, K, M, N).
    """
    F = T.as_tensor(F)
    a_shape = anchors.shape[:-1]
    d = anchors.shape[-1]
    an = T.reshape(T.l2_normalize(anchors, what="contextual anchor"), (-1, d))
    Fn = T.l2_normalize(F, what="patch")
    scores = an @ T.swap_last(Fn)  # (B.., A, N)
    return T.reshape(scores, (*F.shape[:-2], *a_shape, F.shape[-2]))


def ctx_branch_scores(scores: Tensor, pool_sizes: list[int]) -> Tensor:
    """Top-k pooled score per branch and class: (..., K, M, N) -> (..., K, M)."""
    K = scores.shape[-3]
    if len(pool_sizes) != K:
        raise ContractError(f"need {K} pooling sizes, got {len(pool_sizes)}")
    pooled = [T.topk_mean(scores[..., k, :, :], pool_sizes[k]) for k in range(K)]
    return T.stack(pooled, axis=-2)


def ctx_log_probs(branch_scores: Tensor, tau: float) -> Tensor:
    """log of the branch-averaged softmax, (..., K, M) -> (..., M).

    Computed as logsumexp over branches of the per-branch log-softmax minus
    log K, which never forms a probability that could underflow.
    """
    K = branch_scores.shape[-2]
    per_branch = T.log_softmax(branch_scores, tau=tau, axis=-1)
    return T.logsumexp(per_branch, axis=-2) - math.log(K)


def ctx_probs(branch_scores: Tensor, tau: float) -> Tensor:
    """(1/K) sum_k softmax(S_k / tau)."""
    K = branch_scores.shape[-2]
    return T.scale(T.sum(T.softmax(branch_scores, tau=tau, axis=-1), axis=-2), 1.0 / K)
