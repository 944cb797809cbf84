"""Binary containers: GCKP checkpoints and GANC anchor dumps.

Both use the same little-endian named-tensor record:
u16 name length, UTF-8 name, u8 rank, rank x u32 extents, f64 payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .errors import FormatError, GaplError

GCKP_MAGIC = b"GCKP"
GANC_MAGIC = b"GANC"
VERSION = 1
MOMENTUM_PREFIX = "momentum:"


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.off)
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype=np.float64)
    parts = [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return b"".join(parts)


def _decode_tensor(r: _Reader) -> tuple[str, np.ndarray]:
    (n,) = r.unpack("<H", "tensor name length")
    start = r.off
    try:
        name = r.take(n, "tensor name").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("tensor name is not UTF-8", start) from None
    (rank,) = r.unpack("<B", "tensor rank")
    shape = r.unpack(f"<{rank}I", "tensor extents")
    count = int(np.prod(shape)) if rank else 1
    payload = r.take(8 * count, f"payload of {name}")
    return name, np.frombuffer(payload, "<f8").astype(np.float64).reshape(shape)


def _encode_container(magic: bytes, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [magic, struct.pack("<II", VERSION, len(tensors))]
    parts += [_encode_tensor(k, v) for k, v in tensors.items()]
    return b"".join(parts)


def _decode_container(buf: bytes, magic: bytes) -> tuple[_Reader, dict[str, np.ndarray]]:
    r = _Reader(buf)
    got = r.take(4, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        at = r.off
        name, arr = _decode_tensor(r)
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", at)
        tensors[name] = arr
    return r, tensors


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: TrainConfig
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors = dict(ckpt.params)
    for k, v in ckpt.momentum.items():
        tensors[MOMENTUM_PREFIX + k] = v
    cfg = ckpt.config.to_json().encode("utf-8")
    return (_encode_container(GCKP_MAGIC, tensors) + struct.pack("<I", len(cfg)) + cfg
            + struct.pack("<Q", ckpt.epoch))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r, tensors = _decode_container(buf, GCKP_MAGIC)
    (n,) = r.unpack("<I", "config length")
    at = r.off
    blob = r.take(n, "config json")
    try:
        cfg = TrainConfig.from_json(blob.decode("utf-8"))
    except (ValueError, GaplError) as exc:
        raise FormatError(f"bad config snapshot: {exc}", at) from None
    (epoch,) = r.unpack("<Q", "epoch counter")
    if r.off != len(buf):
        raise FormatError("trailing bytes after checkpoint", r.off)
    params = {k: v for k, v in tensors.items() if not k.startswith(MOMENTUM_PREFIX)}
    momentum = {k[len(MOMENTUM_PREFIX):]: v for k, v in tensors.items() if k.startswith(MOMENTUM_PREFIX)}
    for k, v in momentum.items():
        if k not in params or params[k].shape != v.shape:
            raise FormatError(f"momentum buffer {k!r} does not match a parameter", None)
    return Checkpoint(params, cfg, momentum, int(epoch))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# --------------------------------------------------------------------------
# anchor dumps


@dataclass
class AnchorDump:
    labels: np.ndarray
    domains: np.ndarray
    f: np.ndarray  # (S, d)
    gamma: np.ndarray  # (S, d)
    a_style: np.ndarray  # (S, d), anchor of the ground-truth class
    a_ctx: np.ndarray  # (K, M, d)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"label": self.labels.astype(np.float64), "domain": self.domains.astype(np.float64),
                "f": self.f, "gamma": self.gamma, "a_style": self.a_style, "a_ctx": self.a_ctx}


def encode_anchors(dump: AnchorDump) -> bytes:
    return _encode_container(GANC_MAGIC, dump.tensors())


def decode_anchors(buf: bytes) -> AnchorDump:
    r, t = _decode_container(buf, GANC_MAGIC)
    if r.off != len(buf):
        raise FormatError("trailing bytes after anchor dump", r.off)
    missing = {"label", "domain", "f", "gamma", "a_style", "a_ctx"} - set(t)
    if missing:
        raise FormatError(f"anchor dump lacks {sorted(missing)}", None)
    return AnchorDump(t["label"].astype(np.int64), t["domain"].astype(np.int64),
                      t["f"], t["gamma"], t["a_style"], t["a_ctx"])


def write_anchors(path, dump: AnchorDump) -> None:
    Path(path).write_bytes(encode_anchors(dump))


def read_anchors(path) -> AnchorDump:
    return decode_anchors(Path(path).read_bytes())
