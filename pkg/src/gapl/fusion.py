"""Input-adaptive branch fusion and the training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import mlp
from .tensor import Tensor

CE_FLOOR = 1e-12


@dataclass
class BranchOutputs:
    """Per-sample outputs of every stream; inactive streams are None."""

    z_global: Tensor | None
    z_gram: Tensor | None
    z_ctx: Tensor | None
    w_branch: Tensor
    z_fused: Tensor
    p_global: Tensor | None
    p_gram: Tensor | None
    p_ctx: Tensor | None
    p_fused: Tensor
    # log-probabilities, for the cross-entropy terms
    logp: dict[str, Tensor] = field(default_factory=dict)
    gamma: Tensor | None = None
    w_text: Tensor | None = None


def fusion_descriptor(f: Tensor, gamma: Tensor | None) -> Tensor:
    """[f / |f|; gamma / |gamma|]; a missing gate contributes a zero block."""
    f = T.as_tensor(f)
    fn = T.l2_normalize(f, what="global feature")
    if gamma is None:
        gn = T.Tensor(np.zeros(f.shape))
    else:
        gn = T.l2_normalize(gamma, what="style gate")
    return T.concat([fn, gn], axis=-1)


def branch_weights(s: Tensor, params: dict[str, Tensor], T_bw: float = 1.0,
                   active: tuple[bool, bool, bool] = (True, True, True)) -> Tensor:
    """Softmax over (global, gram, ctx) of the fusion network output / T_bw.

    Inactive branches are masked out and get weight exactly 0.
    """
    logits = mlp(s, params, "fusion")
    mask = None if all(active) else np.asarray(active, dtype=bool)
    return T.softmax(logits, tau=T_bw, mask=mask)


def fuse(z_global: Tensor | None, z_gram: Tensor | None, z_ctx: Tensor | None,
         w_branch: Tensor, T_m=(1.0, 1.0, 1.0)) -> tuple[Tensor, Tensor]:
    """z_fused = sum_m w_m z_m / T_m over the streams present; returns (z_fused, p_fused)."""
    terms = []
    for m, z in enumerate((z_global, z_gram, z_ctx)):
        if z is None:
            continue
        wm = w_branch[..., m:m + 1]
        terms.append(T.scale(wm * z, 1.0 / T_m[m]))
    if not terms:
        raise ContractError("fuse needs at least one stream")
    z = terms[0]
    for t in terms[1:]:
        z = z + t
    return z, T.softmax(z)


@dataclass
class LossCounter:
    """Counts cross-entropy evaluations that hit the probability floor."""

    floored: int = 0


def cross_entropy(logp: Tensor, y: np.ndarray, counter: LossCounter | None = None) -> Tensor:
    """Per-sample -log p[y] from log-probabilities (..., M).

    A probability that underflowed to exactly zero is floored at 1e-12 and
    counted in ``counter``.
    """
    y = np.asarray(y)
    if logp.ndim == 1:
        picked = logp[int(y)]
    else:
        picked = logp[np.arange(logp.shape[0]), y]
    dead = np.isneginf(picked.data)
    if np.any(dead):
        if counter is not None:
            counter.floored += int(np.sum(dead))
        picked = T.masked_fill(picked, dead, math.log(CE_FLOOR))
    return T.scale(picked, -1.0)


def losses(out: BranchOutputs, y, w_learn: Tensor, w_fixed: Tensor, active: tuple[str, ...],
           lambda_fused: float = 1.0, lambda_txt: float = 25.0, lambda_img: float = 10.0,
           counter: LossCounter | None = None) -> dict[str, Tensor]:
    """Objective terms, averaged over the batch.

    L_cls sums stream cross-entropies over active streams, L_txt is the mean
    absolute deviation of the learned text features from the fixed bank, and
    L_img is zero because nothing image-side is trainable.
    """
    y = np.asarray(y)
    names = {"g": "global", "s": "gram", "c": "ctx"}
    ce = {}
    for s in active:
        ce[names[s]] = T.mean(cross_entropy(out.logp[names[s]], y, counter))
    l_cls = None
    for v in ce.values():
        l_cls = v if l_cls is None else l_cls + v
    l_fused = T.mean(cross_entropy(out.logp["fused"], y, counter))
    l_txt = T.mean(T.absolute(w_learn - w_fixed))
    l_img = T.Tensor(0.0)
    total = l_cls + T.scale(l_fused, lambda_fused) + T.scale(l_txt, lambda_txt) + T.scale(l_img, lambda_img)
    return {"L_cls": l_cls, "L_fused": l_fused, "L_txt": l_txt, "L_img": l_img, "L_total": total,
            **{f"L_ce_{k}": v for k, v in ce.items()}}
