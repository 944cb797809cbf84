"""Central finite differences as an oracle for the tape's gradients."""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError


@dataclass
class FDReport:
    max_rel_err: float
    worst: tuple[str, tuple[int, ...]] | None
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def rel_err(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    return np.abs(g_ad - g_fd) / np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))


def numeric_gradient(params: Mapping[str, np.ndarray], loss_fn: Callable[[Mapping[str, np.ndarray]], float],
                     name: str, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` with respect to ``params[name]``.

    ``params[name]`` is perturbed in place one coordinate at a time and restored.
    """
    x = params[name]
    grad = np.zeros(x.shape)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn(params))
        flat[i] = orig - h
        down = float(loss_fn(params))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            coord = ", ".join(str(int(c)) for c in np.unravel_index(i, x.shape))
            raise NumericError(f"non-finite loss while perturbing {name}[{coord}]")
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def finite_diff_check(params: Mapping[str, np.ndarray], loss_fn, ad_grads: Mapping[str, np.ndarray],
                      h: float = 1e-5, tol: float = 1e-4) -> FDReport:
    """Compare ``ad_grads`` against central differences of ``loss_fn`` coordinate by coordinate.

    ``loss_fn`` must be pure and deterministic: it receives the (mutated in
    place) parameter arrays and returns a float.
    """
    worst_err = 0.0
    worst = None
    per_param = {}
    for name in params:
        g_ad = np.asarray(ad_grads[name], dtype=np.float64)
        if not np.all(np.isfinite(g_ad)):
            coord = ", ".join(str(int(c)) for c in np.argwhere(~np.isfinite(g_ad))[0])
            raise NumericError(f"non-finite analytic gradient at {name}[{coord}]")
        g_fd = numeric_gradient(params, loss_fn, name, h)
        err = rel_err(g_ad, g_fd)
        per_param[name] = float(err.max()) if err.size else 0.0
        if err.size and err.max() > worst_err:
            worst_err = float(err.max())
            worst = (name, tuple(int(c) for c in np.unravel_index(int(err.argmax()), err.shape)))
    return FDReport(worst_err, worst, tol, per_param)
