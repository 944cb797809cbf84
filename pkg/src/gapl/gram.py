"""Gram-anchored stream: channel-energy descriptor, style gate and style text anchors."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ContractError, ResourceGuardError
from .nn import mlp
from .tensor import Tensor


@dataclass
class GramDescriptor:
    mode: str
    g_diag: Tensor  # (..., d)
    var: Tensor | None = None  # (..., d)
    g_full: Tensor | None = None  # (..., d*d)


def gate_input_extent(mode: str, d: int) -> int:
    return {"diag": d, "diag+var": 2 * d, "full": d * d}[mode]


def gram_descriptor(F: Tensor, mode: str = "diag", full_limit: int = 64) -> GramDescriptor:
    """Second-order statistics of patch tokens ``F`` (..., N, d).

    ``diag`` is the per-channel mean of squares, computed without forming the
    d x d matrix. ``diag+var`` adds the per-channel variance; ``full`` also
    returns the flattened Gram matrix and refuses when d exceeds ``full_limit``.
    """
    F = T.as_tensor(F)
    if F.ndim < 2 or F.shape[-2] < 1:
        raise ContractError(f"patch tokens need shape (..., N>=1, d), got {F.shape}")
    N, d = F.shape[-2], F.shape[-1]
    if mode == "full" and d > full_limit:
        raise ResourceGuardError(f"full Gram matrix needs d={d} <= guard limit {full_limit}")
    g_diag = T.mean(F * F, axis=-2)
    if mode == "diag":
        return GramDescriptor(mode, g_diag)
    if mode == "diag+var":
        centred = F - T.mean(F, axis=-2, keepdims=True)
        return GramDescriptor(mode, g_diag, var=T.mean(centred * centred, axis=-2))
    if mode == "full":
        G = T.scale(T.swap_last(F) @ F, 1.0 / N)
        return GramDescriptor(mode, g_diag, g_full=T.reshape(G, (*F.shape[:-2], d * d)))
    raise ContractError(f"unknown descriptor mode {mode!r}")


def gate_features(desc: GramDescriptor, eps: float) -> Tensor:
    """Log-compressed gate input for the descriptor mode."""
    if desc.mode == "diag":
        return T.log_eps(desc.g_diag, eps)
    if desc.mode == "diag+var":
        return T.concat([T.log_eps(desc.g_diag, eps), T.log_eps(desc.var, eps)], axis=-1)
    # off-diagonal entries can be negative
    return T.signed_log_eps(desc.g_full, eps)


def style_gate(desc: GramDescriptor, params: dict[str, Tensor], eps: float = 1e-6,
               prefix: str = "gate") -> Tensor:
    """Gate in (0, 1)^d: sigmoid of a two-layer network on the log descriptor."""
    x = gate_features(desc, eps)
    n_in = params[f"{prefix}.fc1.weight"].shape[0]
    if x.shape[-1] != n_in:
        raise ContractError(f"gate expects {n_in} inputs for this network, descriptor gives {x.shape[-1]}")
    return T.sigmoid(mlp(x, params, prefix))


def style_anchor(w: Tensor, gamma: Tensor) -> Tensor:
    """w_c * (1 + gamma) for every class; gamma (..., d) gives anchors (..., M, d)."""
    gamma = T.as_tensor(gamma)
    if gamma.shape[-1] != w.shape[-1]:
        raise ContractError(f"gate extent {gamma.shape[-1]} != text extent {w.shape[-1]}")
    lead = gamma.shape[:-1]
    g = T.reshape(gamma, (*lead, 1, gamma.shape[-1]))
    return w * (g + 1.0)


def gram_logits(f: Tensor, anchors: Tensor, tau: float) -> Tensor:
    """cos(f, a_c) / tau; ``anchors`` (..., M, d) pairs with ``f`` (..., d)."""
    f = T.as_tensor(f)
    fn = T.l2_normalize(f, what="global feature")
    an = T.l2_normalize(anchors, what="style anchor")
    fn = T.reshape(fn, (*f.shape[:-1], 1, f.shape[-1]))
    return T.scale(T.sum(an * fn, axis=-1), 1.0 / tau)


def gram_probs(f: Tensor, anchors: Tensor, tau: float) -> Tensor:
    return T.softmax(gram_logits(f, anchors, tau))

