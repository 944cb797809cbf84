"""Parameter initialization and the batched three-stream forward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .contextual import (contextual_anchors, ctx_branch_scores, ctx_log_probs, ctx_probs,
                         init_contextual, score_map)
from .errors import ContractError, ResourceGuardError
from .fusion import BranchOutputs, branch_weights, fuse, fusion_descriptor
from .gram import gate_input_extent, gram_descriptor, gram_logits, style_anchor, style_gate
from .nn import init_mlp
from .tensor import Tensor
from .text import ClassTextBank, fuse_text, global_logits

PARAM_GROUPS = {
    "text": ("text.",),
    "gate": ("gate.",),
    "signals": ("ctx.signals",),
    "attention": ("ctx.attn.",),
    "ctx_out": ("ctx.out.",),
    "fusion": ("fusion.",),
}


def param_group(name: str) -> str:
    for group, prefixes in PARAM_GROUPS.items():
        if any(name.startswith(p) for p in prefixes):
            return group
    raise KeyError(name)


@dataclass
class Model:
    cfg: TrainConfig
    w_fixed: Tensor
    params: dict[str, Tensor]

    @property
    def d(self) -> int:
        return self.w_fixed.shape[1]

    @property
    def M(self) -> int:
        return self.w_fixed.shape[0]

    def bank(self, alpha: float | None = None) -> ClassTextBank:
        a = self.cfg.alpha if alpha is None else alpha
        return ClassTextBank(self.w_fixed, self.params["text.w_learn"], a)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def init_model(w_fixed: np.ndarray, cfg: TrainConfig, seed: int | None = None) -> Model:
    """Fresh parameters: w_learn near the fixed bank, zero-initialized last layers."""
    w_fixed = np.asarray(w_fixed, dtype=np.float64)
    M, d = w_fixed.shape
    if cfg.descriptor_mode == "full" and d > cfg.full_gram_limit:
        raise ResourceGuardError(f"full Gram gate needs d={d} <= guard limit {cfg.full_gram_limit}")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    w_learn = w_fixed + cfg.init_noise * rng.standard_normal((M, d))
    params = {"text.w_learn": Tensor(w_learn, requires_grad=True, name="text.w_learn")}
    params.update(init_mlp(rng, "gate", gate_input_extent(cfg.descriptor_mode, d), cfg.gate_hidden(d), d))
    params.update(init_contextual(rng, d, cfg.K, cfg.P, cfg.ctx_hidden(d)))
    params.update(init_mlp(rng, "fusion", 2 * d, cfg.h_b, 3))
    return Model(cfg, Tensor(w_fixed), params)


def forward(model: Model, F, f, mode: str = "train", alpha: float | None = None,
            alpha_rows: np.ndarray | None = None, streams: tuple[str, ...] | None = None) -> BranchOutputs:
    """Run every active stream and the fusion head on a batch.

    ``F`` is (B, N, d) patch tokens and ``f`` (B, d) global features. ``mode``
    selects the learned (``train``) or alpha-blended (``infer``) text bank.
    """
    cfg = model.cfg
    streams = cfg.active_streams if streams is None else streams
    F = T.as_tensor(F)
    f = T.as_tensor(f)
    if F.ndim != 3 or f.ndim != 2 or F.shape[-1] != model.d or f.shape[-1] != model.d:
        raise ContractError(f"batch shapes {F.shape}, {f.shape} do not match d={model.d}")
    p = model.params
    w = fuse_text(model.bank(alpha), mode, alpha_rows)

    logp: dict[str, Tensor] = {}
    z_global = p_global = z_gram = p_gram = z_ctx = p_ctx = gamma = None
    if "g" in streams:
        z_global = global_logits(f, w, cfg.tau)
        logp["global"] = T.log_softmax(z_global)
        p_global = T.softmax(z_global)
    if "s" in streams:
        desc = gram_descriptor(F, cfg.descriptor_mode, cfg.full_gram_limit)
        gamma = style_gate(desc, p, cfg.eps)
        z_gram = gram_logits(f, style_anchor(w, gamma), cfg.tau)
        logp["gram"] = T.log_softmax(z_gram)
        p_gram = T.softmax(z_gram)
    if "c" in streams:
        anchors = contextual_anchors(w, p)
        scores = score_map(anchors, F)
        pools = [cfg.pool_size(k, F.shape[1]) for k in range(1, cfg.K + 1)]
        pooled = ctx_branch_scores(scores, pools)
        z_ctx = ctx_log_probs(pooled, cfg.tau)
        logp["ctx"] = z_ctx
        p_ctx = ctx_probs(pooled, cfg.tau)

    s = fusion_descriptor(f, gamma)
    active = tuple(x in streams for x in ("g", "s", "c"))
    wb = branch_weights(s, p, cfg.T_bw, active)
    z_fused, p_fused = fuse(z_global, z_gram, z_ctx, wb, cfg.T_m)
    logp["fused"] = T.log_softmax(z_fused)
    return BranchOutputs(z_global, z_gram, z_ctx, wb, z_fused, p_global, p_gram, p_ctx, p_fused,
                         logp=logp, gamma=gamma, w_text=w)


def style_anchors_for_labels(model: Model, F, labels, mode: str = "infer",
                             alpha: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gate and ground-truth-class style anchor per sample, as arrays."""
    cfg = model.cfg
    with T.no_grad():
        w = fuse_text(model.bank(alpha), mode)
        desc = gram_descriptor(T.as_tensor(F), cfg.descriptor_mode, cfg.full_gram_limit)
        gamma = style_gate(desc, model.params, cfg.eps)
    labels = np.asarray(labels)
    a = w.data[labels] * (1.0 + gamma.data)
    return gamma.data, a


def context_anchor_bank(model: Model, mode: str = "infer", alpha: float | None = None) -> np.ndarray:
    with T.no_grad():
        w = fuse_text(model.bank(alpha), mode)
        return contextual_anchors(w, model.params).data

