from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

from .errors import ContractError, UsageError

STREAMS = ("g", "s", "c")
STREAM_NAMES = {"g": "global", "s": "gram", "c": "ctx"}
DESCRIPTOR_MODES = ("diag", "diag+var", "full")


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of the model, objective and optimizer.

    ``h_s``, ``h_c`` are None for the ``max(d // 4, 8)`` sizing rule and
    ``pool_sizes`` is None for branch k pooling ``k * 10`` patches.
    """

    alpha: float = 0.7
    tau: float = 0.01
    eps: float = 1e-6
    K: int = 4
    P: int = 8
    descriptor_mode: str = "diag"
    h_s: int | None = None
    h_c: int | None = None
    h_b: int = 64
    T_bw: float = 1.0
    T_m: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lambda_fused: float = 1.0
    lambda_txt: float = 25.0
    lambda_img: float = 10.0
    lr: float = 1e-4
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 16
    seed: int = 7
    active_streams: tuple[str, ...] = STREAMS
    full_gram_limit: int = 64
    pool_sizes: tuple[int, ...] | None = None
    init_noise: float = 0.02
    # recorded in the config only; there is no encoder here to insert prompt tokens into
    context_length: int = 4
    prompt_depth: int = 12

    def __post_init__(self):
        object.__setattr__(self, "T_m", tuple(float(t) for t in self.T_m))
        object.__setattr__(self, "active_streams", tuple(s for s in STREAMS if s in self.active_streams))
        if self.pool_sizes is not None:
            object.__setattr__(self, "pool_sizes", tuple(int(k) for k in self.pool_sizes))
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must lie in [0, 1]")
        if self.tau <= 0 or self.eps <= 0 or self.T_bw <= 0 or min(self.T_m) <= 0:
            raise ContractError("temperatures and eps must be positive")
        if len(self.T_m) != 3:
            raise ContractError("T_m needs one temperature per stream")
        if min(self.lambda_fused, self.lambda_txt, self.lambda_img) < 0:
            raise ContractError("loss weights must be non-negative")
        if self.lr < 0:
            raise ContractError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size >= 1 and epochs >= 0 required")
        if self.K < 1 or self.P < 1:
            raise ContractError("K and P must be positive")
        if self.descriptor_mode not in DESCRIPTOR_MODES:
            raise ContractError(f"descriptor_mode must be one of {DESCRIPTOR_MODES}")
        if not self.active_streams:
            raise ContractError("at least one stream must be active")
        if self.pool_sizes is not None and (len(self.pool_sizes) != self.K or min(self.pool_sizes) < 1):
            raise ContractError("pool_sizes needs K positive entries")

    def gate_hidden(self, d: int) -> int:
        return self.h_s if self.h_s is not None else max(d // 4, 8)

    def ctx_hidden(self, d: int) -> int:
        return self.h_c if self.h_c is not None else max(d // 4, 8)

    def pool_size(self, k: int, N: int) -> int:
        """Pooling size of branch ``k`` (1-based), clamped to the patch count."""
        size = self.pool_sizes[k - 1] if self.pool_sizes is not None else 10 * k
        return min(size, N)

    def stream_on(self, s: str) -> bool:
        return s in self.active_streams

    def with_overrides(self, **kw) -> TrainConfig:
        return replace(self, **kw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["T_m"] = list(self.T_m)
        out["active_streams"] = list(self.active_streams)
        out["pool_sizes"] = None if self.pool_sizes is None else list(self.pool_sizes)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self, exclude: tuple[str, ...] = ()) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown TrainConfig keys: {sorted(unknown)}")
        raw = dict(raw)
        if "active_streams" in raw:
            raw["active_streams"] = parse_streams(raw["active_streams"])
        for key in ("T_m", "pool_sizes"):
            if raw.get(key) is not None:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    @classmethod
    def from_json(cls, text: str) -> TrainConfig:
        return cls.from_dict(json.loads(text))


def parse_streams(value) -> tuple[str, ...]:
    """Accept "g,s,c", ["g", "s"], or long names like "global"."""
    if isinstance(value, str):
        value = [v for v in value.replace(" ", "").split(",") if v]
    long = {v: k for k, v in STREAM_NAMES.items()}
    out = []
    for v in value:
        v = v.lower()
        v = long.get(v, v)
        if v not in STREAMS:
            raise UsageError(f"unknown stream {v!r}; use g, s, c")
        out.append(v)
    if not out:
        raise UsageError("no streams selected")
    return tuple(s for s in STREAMS if s in out)
