"""Deterministic mini-batch SGD with momentum over every model parameter."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .config import TrainConfig
from .data import FeatureDataset
from .errors import ContractError, NumericError
from .fusion import LossCounter, losses
from .model import Model, forward, init_model
from .tensor import Tensor

log = logging.getLogger(__name__)


class SGD:
    """v <- momentum * v + g;  theta <- theta - lr * v."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0,
                 buffers: dict[str, np.ndarray] | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.buffers = {k: np.zeros(p.shape) for k, p in params.items()}
        if buffers:
            for k, v in buffers.items():
                self.buffers[k] = np.array(v, dtype=np.float64)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            v = self.buffers[name]
            v *= self.momentum
            v += grads[name]
            p.data = p.data - self.lr * v


@dataclass
class EpochStats:
    epoch: int
    loss: float
    acc: dict[str, float]
    floored: int = 0

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "L_total": self.loss, "acc": self.acc, "floored": self.floored}


@dataclass
class TrainResult:
    model: Model
    checkpoint: Checkpoint
    log: list[EpochStats] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.log]


def check_compatible(data: FeatureDataset, w_shape: tuple[int, ...]) -> None:
    if tuple(w_shape) != (data.M, data.d):
        raise ContractError(f"model text bank {tuple(w_shape)} does not match data (M={data.M}, d={data.d})")


def batch_objective(model: Model, data: FeatureDataset, idx: np.ndarray, mode: str = "train",
                    counter: LossCounter | None = None):
    """Forward pass and objective terms for the samples ``idx``."""
    cfg = model.cfg
    out = forward(model, data.F[idx], data.f[idx], mode=mode)
    terms = losses(out, data.labels[idx], model.params["text.w_learn"], model.w_fixed, cfg.active_streams,
                   cfg.lambda_fused, cfg.lambda_txt, cfg.lambda_img, counter)
    return terms, out


def batch_order(n: int, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    """Shuffled mini-batches of epoch ``epoch`` (1-based), seeded by (seed, epoch)."""
    perm = np.random.default_rng((cfg.seed, epoch)).permutation(n)
    return [perm[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def _correct(out, labels: np.ndarray) -> dict[str, int]:
    res = {}
    for key, p in (("global", out.p_global), ("gram", out.p_gram), ("ctx", out.p_ctx), ("fused", out.p_fused)):
        if p is not None:
            res[key] = int(np.sum(np.argmax(p.data, axis=-1) == labels))
    return res


def train(data: FeatureDataset, cfg: TrainConfig, model: Model | None = None,
          start: Checkpoint | None = None) -> TrainResult:
    """Train on ``data`` for ``cfg.epochs`` epochs.

    Resuming from ``start`` restores its parameters, momentum buffers and
    epoch counter.
    """
    if len(data) == 0:
        raise ContractError("empty training set")
    if model is None:
        model = init_model(data.w_fixed, cfg)
    if start is not None:
        for k, v in start.params.items():
            model.params[k].data = np.array(v)
    check_compatible(data, model.params["text.w_learn"].shape)
    opt = SGD(model.params, cfg.lr, cfg.momentum, start.momentum if start else None)
    first = (start.epoch if start else 0) + 1
    history: list[EpochStats] = []
    for epoch in range(first, first + cfg.epochs):
        total, seen = 0.0, 0
        correct: dict[str, int] = {}
        counter = LossCounter()
        for b, idx in enumerate(batch_order(len(data), cfg, epoch)):
            try:
                terms, out = batch_objective(model, data, idx, "train", counter)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from None
            value = terms["L_total"].item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = T.backward(terms["L_total"], model.params)
            opt.step(grads)
            total += value * len(idx)
            seen += len(idx)
            for k, v in _correct(out, data.labels[idx]).items():
                correct[k] = correct.get(k, 0) + v
        stats = EpochStats(epoch, total / seen, {k: 100.0 * v / seen for k, v in correct.items()},
                           counter.floored)
        history.append(stats)
        log.info("epoch %d  L_total %.6f  acc %s", epoch, stats.loss, stats.acc)
    ckpt = Checkpoint({k: p.data.copy() for k, p in model.params.items()}, cfg,
                      {k: v.copy() for k, v in opt.buffers.items()}, first - 1 + cfg.epochs)
    return TrainResult(model, ckpt, history)


def model_from_checkpoint(ckpt: Checkpoint, w_fixed: np.ndarray, cfg: TrainConfig | None = None) -> Model:
    cfg = ckpt.config if cfg is None else cfg
    fresh = init_model(w_fixed, cfg)
    if set(fresh.params) != set(ckpt.params):
        raise ContractError("checkpoint parameter names do not match the configuration")
    for k, p in fresh.params.items():
        if p.shape != ckpt.params[k].shape:
            raise ContractError(f"checkpoint tensor {k} has shape {ckpt.params[k].shape}, expected {p.shape}")
        p.data = np.array(ckpt.params[k])
    return fresh


def predict(model: Model, data: FeatureDataset, mode: str = "infer", alpha: float | None = None,
            alpha_rows: np.ndarray | None = None, batch_size: int = 256):
    """Probabilities of every stream for every sample, in sample order."""
    keys = ("p_global", "p_gram", "p_ctx", "p_fused", "w_branch")
    chunks: dict[str, list[np.ndarray]] = {k: [] for k in keys}
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            sl = slice(start, start + batch_size)
            out = forward(model, data.F[sl], data.f[sl], mode=mode, alpha=alpha, alpha_rows=alpha_rows)
            for k in keys:
                v = getattr(out, k)
                if v is not None:
                    chunks[k].append(v.data)
    return {k: np.concatenate(v) for k, v in chunks.items() if v}


def argmax_lowest(p: np.ndarray, classes: np.ndarray | None = None) -> np.ndarray:
    """Row argmax (ties to the lowest class id), optionally restricted to ``classes``."""
    if classes is None:
        return np.argmax(p, axis=-1)
    classes = np.sort(np.asarray(classes))
    return classes[np.argmax(p[:, classes], axis=-1)]

