"""Dense float64 tensors with a reverse-mode tape.

Every primitive records an op kind, its parent nodes and whatever values its
backward rule needs. Backward rules live in ``BACKWARD_RULES`` keyed by op
kind so tests can swap one out (see :func:`override_rule`) and check that the
finite-difference harness notices.

Broadcasting is numpy's, restricted to what the model needs; gradients are
summed back to the operand shape.
"""

from __future__ import annotations

import contextlib
import threading
from collections.abc import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DomainError, NumericError

_state = threading.local()
_alloc_hooks: list[Callable[[tuple[int, ...]], None]] = []


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a tape (used by finite differences and eval)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def allocation_hook(fn: Callable[[tuple[int, ...]], None]) -> Iterator[None]:
    """Call ``fn(shape)`` for every tensor created inside the block."""
    _alloc_hooks.append(fn)
    try:
        yield
    finally:
        _alloc_hooks.remove(fn)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "op", "parents", "ctx")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx: dict = {}
        for hook in _alloc_hooks:
            hook(arr.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> Tensor:
        return swap_last(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], **ctx) -> Tensor:
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.op = op
        out.parents = tuple(parents)
        out.ctx = ctx
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _node(a.data + b.data, "add", (a, b))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _node(a.data - b.data, "sub", (a, b))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _node(a.data * b.data, "mul", (a, b))


def _check_broadcast(a: Tensor, b: Tensor, what: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{what}: incompatible shapes {a.shape} and {b.shape}") from None


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _node(x.data * c, "scale", (x,), c=float(c))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, "sigmoid", (x,), y=out)


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.maximum(x.data, 0.0), "relu", (x,), mask=x.data > 0)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _node(y, "exp", (x,), y=y)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _node(np.log(x.data), "log", (x,))


def log_eps(x, eps: float) -> Tensor:
    """log(x + eps) for x >= 0."""
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("log_eps requires a non-negative input")
    return _node(np.log(x.data + eps), "log_eps", (x,), eps=eps)


def signed_log_eps(x, eps: float) -> Tensor:
    """sign(x) * log(|x| + eps); defined for any real x."""
    x = as_tensor(x)
    y = np.sign(x.data) * np.log(np.abs(x.data) + eps)
    return _node(y, "signed_log_eps", (x,), eps=eps)


def masked_fill(x, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` holds with the constant ``value`` (no gradient there)."""
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return _node(np.where(mask, value, x.data), "masked_fill", (x,), keep=~mask)


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.abs(x.data), "abs", (x,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ContractError(f"matmul: batch extents differ, {a.shape} x {b.shape}") from None
    return _node(np.matmul(a.data, b.data), "matmul", (a, b))


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.swapaxes(x.data, -1, -2), "swap_last", (x,))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(tuple(shape)), "reshape", (x,), shape=x.shape)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _node(np.sum(x.data, axis=axis, keepdims=keepdims), "sum", (x,),
                 axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    return _node(np.asarray(x.data[index]), "getitem", (x,), index=index)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    sizes = [x.shape[ax] for x in xs]
    return _node(np.concatenate([x.data for x in xs], axis=ax), "concat", xs,
                 axis=ax, sizes=sizes)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % (xs[0].ndim + 1)
    return _node(np.stack([x.data for x in xs], axis=ax), "stack", xs, axis=ax)


def l2_normalize(x, axis: int = -1, what: str = "vector") -> Tensor:
    """Scale to unit L2 norm along ``axis``; zero norm is an error naming the slice."""
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norm == 0):
        bad = np.argwhere(np.squeeze(norm == 0, axis=axis))
        where = tuple(int(i) for i in bad[0]) if bad.size else ()
        raise DegenerateInputError(f"zero-norm {what} at index {where if len(where) != 1 else where[0]}")
    y = x.data / norm
    return _node(y, "l2_normalize", (x,), y=y, norm=norm, axis=axis)


def _check_finite(z: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(z)):
        raise NumericError(f"{what}: non-finite input")


def softmax(z, tau: float = 1.0, axis: int = -1, mask=None) -> Tensor:
    """softmax(z / tau) with max subtraction.

    ``mask`` (boolean, broadcastable) marks entries that take part; masked-out
    entries get probability exactly 0 and zero gradient.
    """
    z = as_tensor(z)
    _check_finite(z.data, "softmax")
    if tau <= 0:
        raise ContractError("softmax temperature must be positive")
    y = _softmax_np(z.data / tau, axis, mask)
    return _node(y, "softmax", (z,), y=y, tau=tau, axis=axis)


def log_softmax(z, tau: float = 1.0, axis: int = -1) -> Tensor:
    z = as_tensor(z)
    _check_finite(z.data, "log_softmax")
    if tau <= 0:
        raise ContractError("softmax temperature must be positive")
    s = z.data / tau
    s = s - np.max(s, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(s), axis=axis, keepdims=True))
    y = s - lse
    return _node(y, "log_softmax", (z,), p=np.exp(y), tau=tau, axis=axis)


def _softmax_np(s: np.ndarray, axis: int, mask) -> np.ndarray:
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
        if not np.all(np.any(mask, axis=axis)):
            raise ContractError("softmax mask leaves no active entry")
        s = np.where(mask, s, -np.inf)
    s = s - np.max(s, axis=axis, keepdims=True)
    e = np.exp(s)
    return e / np.sum(e, axis=axis, keepdims=True)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "logsumexp")
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    y = np.squeeze(m + np.log(s), axis=axis)
    return _node(y, "logsumexp", (x,), p=e / s, axis=axis)


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, ties to the lowest index."""
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def topk_mean(scores, k: int) -> Tensor:
    """Mean of the k largest entries along the last axis; k is clamped to the extent."""
    scores = as_tensor(scores)
    n = scores.shape[-1] if scores.ndim else 0
    if n == 0:
        raise ContractError("topk_mean of empty scores")
    if k < 1:
        raise ContractError(f"topk_mean needs k >= 1, got {k}")
    k = min(int(k), n)
    idx = topk_indices(scores.data, k)
    picked = np.take_along_axis(scores.data, idx, axis=-1)
    return _node(picked.sum(axis=-1) / k, "topk_mean", (scores,), idx=idx, k=k)


def cosine(u, v) -> Tensor:
    """Cosine similarity of two vectors (last axis)."""
    un = l2_normalize(u, what="operand u")
    vn = l2_normalize(v, what="operand v")
    return sum(un * vn, axis=-1)


# --------------------------------------------------------------------------
# backward rules: rule(node, grad_out) -> one gradient (or None) per parent


def _r_add(n, g):
    a, b = n.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _r_sub(n, g):
    a, b = n.parents
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _r_mul(n, g):
    a, b = n.parents
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _r_scale(n, g):
    return (g * n.ctx["c"],)


def _r_sigmoid(n, g):
    y = n.ctx["y"]
    return (g * y * (1.0 - y),)


def _r_relu(n, g):
    return (g * n.ctx["mask"],)


def _r_exp(n, g):
    return (g * n.ctx["y"],)


def _r_log(n, g):
    return (g / n.parents[0].data,)


def _r_log_eps(n, g):
    return (g / (n.parents[0].data + n.ctx["eps"]),)


def _r_signed_log_eps(n, g):
    return (g / (np.abs(n.parents[0].data) + n.ctx["eps"]),)


def _r_masked_fill(n, g):
    return (np.where(n.ctx["keep"], g, 0.0),)


def _r_abs(n, g):
    return (g * np.sign(n.parents[0].data),)


def _r_matmul(n, g):
    a, b = n.parents
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _r_swap_last(n, g):
    return (np.swapaxes(g, -1, -2),)


def _r_reshape(n, g):
    return (g.reshape(n.ctx["shape"]),)


def _r_sum(n, g):
    x = n.parents[0]
    axis, keepdims = n.ctx["axis"], n.ctx["keepdims"]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is Ellipsis or i is None or isinstance(i, (int, np.integer, slice)) for i in items)


def _r_getitem(n, g):
    x = n.parents[0]
    out = np.zeros(x.shape)
    index = n.ctx["index"]
    if _is_basic_index(index):
        out[index] = g
    else:
        np.add.at(out, index, g)
    return (out,)


def _r_concat(n, g):
    bounds = np.cumsum(n.ctx["sizes"])[:-1]
    return tuple(np.split(g, bounds, axis=n.ctx["axis"]))


def _r_stack(n, g):
    ax = n.ctx["axis"]
    return tuple(np.take(g, i, axis=ax) for i in range(len(n.parents)))


def _r_l2_normalize(n, g):
    y, norm, axis = n.ctx["y"], n.ctx["norm"], n.ctx["axis"]
    return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)


def _r_softmax(n, g):
    y, tau, axis = n.ctx["y"], n.ctx["tau"], n.ctx["axis"]
    return (y * (g - np.sum(g * y, axis=axis, keepdims=True)) / tau,)


def _r_log_softmax(n, g):
    p, tau, axis = n.ctx["p"], n.ctx["tau"], n.ctx["axis"]
    return ((g - p * np.sum(g, axis=axis, keepdims=True)) / tau,)


def _r_logsumexp(n, g):
    return (n.ctx["p"] * np.expand_dims(g, n.ctx["axis"]),)


def _r_topk_mean(n, g):
    x = n.parents[0]
    out = np.zeros(x.shape)
    idx, k = n.ctx["idx"], n.ctx["k"]
    np.put_along_axis(out, idx, np.broadcast_to(np.expand_dims(g / k, -1), idx.shape), axis=-1)
    return (out,)


BACKWARD_RULES: dict[str, Callable] = {
    "add": _r_add,
    "sub": _r_sub,
    "mul": _r_mul,
    "scale": _r_scale,
    "sigmoid": _r_sigmoid,
    "relu": _r_relu,
    "exp": _r_exp,
    "log": _r_log,
    "log_eps": _r_log_eps,
    "signed_log_eps": _r_signed_log_eps,
    "masked_fill": _r_masked_fill,
    "abs": _r_abs,
    "matmul": _r_matmul,
    "swap_last": _r_swap_last,
    "reshape": _r_reshape,
    "sum": _r_sum,
    "getitem": _r_getitem,
    "concat": _r_concat,
    "stack": _r_stack,
    "l2_normalize": _r_l2_normalize,
    "softmax": _r_softmax,
    "log_softmax": _r_log_softmax,
    "logsumexp": _r_logsumexp,
    "topk_mean": _r_topk_mean,
}


@contextlib.contextmanager
def override_rule(op: str, rule: Callable) -> Iterator[None]:
    """Temporarily replace the backward rule of ``op`` (fault injection in tests)."""
    if op not in BACKWARD_RULES:
        raise KeyError(op)
    original = BACKWARD_RULES[op]
    BACKWARD_RULES[op] = rule
    try:
        yield
    finally:
        BACKWARD_RULES[op] = original


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | dict[str, Tensor] | None = None
             ) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss``.

    Returns a map from parameter name to gradient array. Every parameter in
    ``params`` appears in the map; ones the loss does not depend on get zeros.
    Without ``params`` all named leaves reached from the loss are returned.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {loss.shape}")
    if isinstance(params, dict):
        params = list(params.values())
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones(loss.shape)
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if g is None or node.op is None:
                continue
            parent_grads = BACKWARD_RULES[node.op](node, g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
    out: dict[str, np.ndarray] = {}
    if params is None:
        for node in _topo_order(loss) if loss.requires_grad else []:
            if node.op is None and node.name is not None:
                out[node.name] = np.asarray(grads.get(id(node), np.zeros(node.shape)))
        return out
    for p in params:
        if p.name is None:
            raise ContractError("backward: parameters must be named")
        g = grads.get(id(p))
        out[p.name] = np.zeros(p.shape) if g is None else np.array(g, dtype=np.float64).reshape(p.shape)
    return out
