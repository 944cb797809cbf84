"""Two-layer ReLU networks shared by the gate, contextual and fusion heads."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def init_mlp(rng: np.random.Generator, prefix: str, n_in: int, hidden: int, n_out: int,
             zero_last: bool = True) -> dict[str, Tensor]:
    """First layer ~ N(0, 1/n_in); last layer zero unless ``zero_last`` is False."""
    w1 = rng.standard_normal((n_in, hidden)) / np.sqrt(n_in)
    w2 = np.zeros((hidden, n_out)) if zero_last else rng.standard_normal((hidden, n_out)) / np.sqrt(hidden)
    arrays = {
        "fc1.weight": w1,
        "fc1.bias": np.zeros(hidden),
        "fc2.weight": w2,
        "fc2.bias": np.zeros(n_out),
    }
    return {f"{prefix}.{k}": Tensor(v, requires_grad=True, name=f"{prefix}.{k}") for k, v in arrays.items()}


def mlp(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """relu(x W1 + b1) W2 + b2 over the last axis; leading axes are batch."""
    lead = x.shape[:-1]
    h = T.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    h = T.relu(h @ params[f"{prefix}.fc1.weight"] + params[f"{prefix}.fc1.bias"])
    out = h @ params[f"{prefix}.fc2.weight"] + params[f"{prefix}.fc2.bias"]
    return T.reshape(out, (*lead, out.shape[-1])) if x.ndim != 2 else out


def mlp_pre_activations(x: np.ndarray, params: dict[str, Tensor], prefix: str) -> np.ndarray:
    """Hidden-layer inputs, for checking distance to the ReLU kink."""
    x = x.reshape(-1, x.shape[-1])
    return x @ params[f"{prefix}.fc1.weight"].data + params[f"{prefix}.fc1.bias"].data
