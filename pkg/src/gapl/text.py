"""Global invariant stream: learned/fixed text blending and cosine-softmax matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


@dataclass
class ClassTextBank:
    w_fixed: Tensor  # frozen (M, d)
    w_learn: Tensor  # trainable (M, d)
    alpha: float = 0.7

    def __post_init__(self):
        if self.w_fixed.shape != self.w_learn.shape or self.w_fixed.ndim != 2:
            raise ContractError(f"text bank shapes differ: {self.w_fixed.shape} vs {self.w_learn.shape}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must lie in [0, 1]")


def fuse_text(bank: ClassTextBank, mode: str, alpha_rows: np.ndarray | None = None) -> Tensor:
    """Class text features used by every stream.

    ``train`` returns the learned features; ``infer`` blends
    ``alpha * w_learn + (1 - alpha) * w_fixed``. ``alpha_rows`` overrides
    alpha per class (used to fall back to the fixed bank for unseen classes).
    """
    if mode == "train":
        return bank.w_learn
    if mode != "infer":
        raise ContractError(f"unknown text mode {mode!r}")
    if alpha_rows is None:
        return T.scale(bank.w_learn, bank.alpha) + T.scale(bank.w_fixed, 1.0 - bank.alpha)
    a = np.asarray(alpha_rows, dtype=np.float64).reshape(-1, 1)
    return bank.w_learn * a + bank.w_fixed * (1.0 - a)


def global_logits(f: Tensor, w: Tensor, tau: float) -> Tensor:
    """cos(f, w_c) / tau for every class; ``f`` may carry leading batch axes."""
    f = T.as_tensor(f)
    fn = T.l2_normalize(f, what="global feature")
    wn = T.l2_normalize(w, what="class")
    if fn.ndim == 1:
        return T.scale(T.reshape(T.reshape(fn, (1, -1)) @ wn.T, (w.shape[0],)), 1.0 / tau)
    return T.scale(fn @ wn.T, 1.0 / tau)


def global_probs(f: Tensor, w: Tensor, tau: float) -> Tensor:
    return T.softmax(global_logits(f, w, tau))
