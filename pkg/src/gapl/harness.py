"""Gradient-check harness: a tiny model instance checked group by group against
central finite differences of the full objective."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import GenSpec, generate
from .gram import gate_features, gram_descriptor
from .gradcheck import finite_diff_check
from .model import PARAM_GROUPS, Model, init_model, param_group
from .nn import mlp_pre_activations
from .trainer import batch_objective

TINY = dict(d=8, N=6, M=3, K=2, P=2)
KINK_MARGIN = 1e-3


@dataclass
class GradcheckReport:
    seed: int
    tol: float
    groups: dict[str, float]
    worst: dict[str, tuple[str, tuple[int, ...]] | None] = field(default_factory=dict)
    seconds: float = 0.0
    attempts: int = 1

    @property
    def failed(self) -> list[str]:
        return [g for g, e in self.groups.items() if not e < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failed


def tiny_config(cfg: TrainConfig | None = None) -> TrainConfig:
    cfg = cfg or TrainConfig()
    return cfg.with_overrides(K=TINY["K"], P=TINY["P"], h_b=min(cfg.h_b, 16), pool_sizes=None)


def _kink_distance(model: Model, data, idx) -> float:
    """Smallest distance of any non-smooth point (ReLU input, top-k boundary, |.| argument) from its kink."""
    cfg = model.cfg
    p = model.params
    F, f = data.F[idx], data.f[idx]
    dists = [np.abs(p["text.w_learn"].data - model.w_fixed.data).min()]
    with T.no_grad():
        out = batch_objective(model, data, idx)[1]
        w = out.w_text
        if cfg.stream_on("s"):
            x = gate_features(gram_descriptor(T.Tensor(F), cfg.descriptor_mode, cfg.full_gram_limit), cfg.eps)
            dists.append(np.abs(mlp_pre_activations(x.data, p, "gate")).min())
        if cfg.stream_on("c"):
            from .contextual import attention, contextual_anchors, score_map
            att = attention(w, p)
            dists.append(np.abs(mlp_pre_activations(att.data, p, "ctx.out")).min())
            scores = np.sort(score_map(contextual_anchors(w, p), T.Tensor(F)).data, axis=-1)[..., ::-1]
            N = scores.shape[-1]
            for k in range(1, cfg.K + 1):
                m = cfg.pool_size(k, N)
                if m < N:
                    dists.append((scores[..., k - 1, :, m - 1] - scores[..., k - 1, :, m]).min())
        s = np.concatenate([f / np.linalg.norm(f, axis=-1, keepdims=True),
                            (out.gamma.data / np.linalg.norm(out.gamma.data, axis=-1, keepdims=True))
                            if out.gamma is not None else np.zeros_like(f)], axis=-1)
        dists.append(np.abs(mlp_pre_activations(s, p, "fusion")).min())
    return float(min(dists))


def tiny_instance(cfg: TrainConfig, seed: int, max_attempts: int = 200):
    """Data and a randomly perturbed model whose evaluation point stays at least
    ``KINK_MARGIN`` away from every kink; redraws until it does."""
    gen = GenSpec(d=TINY["d"], N=TINY["N"], M=TINY["M"], D=2, shots=1, sigma_patch=1.0, seed=seed)
    data = generate(gen).train
    # shuffled labels keep the softmaxes away from saturation so every group gets gradient
    data.labels = np.random.default_rng((seed, 2)).permutation(data.labels)
    idx = np.arange(len(data))
    for attempt in range(max_attempts):
        model = init_model(data.w_fixed, cfg, seed=(seed, attempt))
        rng = np.random.default_rng((seed, attempt, 1))
        # give the zero-initialized last layers non-trivial values so every group carries gradient
        for name, p in model.params.items():
            if name.endswith("fc2.weight") or name.endswith("fc2.bias"):
                p.data = 0.3 * rng.standard_normal(p.shape)
        if _kink_distance(model, data, idx) >= KINK_MARGIN:
            return model, data, idx, attempt + 1
    raise RuntimeError(f"no kink-free tiny instance within {max_attempts} draws")


def gradcheck(cfg: TrainConfig | None = None, seed: int = 0, tol: float = 1e-4, h: float = 1e-5,
              mode: str = "train") -> GradcheckReport:
    """Reverse-mode gradients of L_total vs central differences, per parameter group."""
    start = time.perf_counter()
    cfg = tiny_config(cfg)
    model, data, idx, attempts = tiny_instance(cfg, seed)

    terms, _ = batch_objective(model, data, idx, mode)
    ad = T.backward(terms["L_total"], model.params)

    arrays = model.arrays()

    def loss_fn(_params) -> float:
        with T.no_grad():
            return batch_objective(model, data, idx, mode)[0]["L_total"].item()

    groups: dict[str, float] = {g: 0.0 for g in PARAM_GROUPS}
    worst: dict[str, tuple[str, tuple[int, ...]] | None] = {g: None for g in PARAM_GROUPS}
    for name in arrays:
        rep = finite_diff_check({name: arrays[name]}, loss_fn, {name: ad[name]}, h=h, tol=tol)
        g = param_group(name)
        if rep.max_rel_err >= groups[g]:
            groups[g] = rep.max_rel_err
            worst[g] = rep.worst
    return GradcheckReport(seed, tol, groups, worst, time.perf_counter() - start, attempts)
