"""Frozen-feature datasets: synthetic multi-domain generator and the GFEA file format.

A sample holds patch tokens ``F`` (N x d) and a global feature ``f`` (the mean
patch row). Domains apply a per-channel affine style ``F * s + b`` on top of
class prototypes, which shifts first-order statistics and channel energies
but leaves class geometry intact.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ContractError, DegenerateInputError, FormatError, UsageError

GFEA_MAGIC = b"GFEA"
GFEA_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")


class FeatureBundle(NamedTuple):
    label: int
    domain: int
    f: np.ndarray
    F: np.ndarray


@dataclass(eq=False)
class FeatureDataset:
    w_fixed: np.ndarray  # (M, d)
    labels: np.ndarray  # (S,) int
    domains: np.ndarray  # (S,) int
    f: np.ndarray  # (S, d)
    F: np.ndarray  # (S, N, d)
    D: int = 1

    def __post_init__(self):
        self.w_fixed = np.ascontiguousarray(self.w_fixed, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.domains = np.asarray(self.domains, dtype=np.int64).reshape(-1)
        S, d = len(self.labels), self.w_fixed.shape[1]
        self.f = np.ascontiguousarray(self.f, dtype=np.float64).reshape(S, d)
        self.F = np.ascontiguousarray(self.F, dtype=np.float64)
        if self.F.ndim != 3:
            raise ContractError(f"patch tokens need shape (S, N, d), got {self.F.shape}")
        self.validate()

    @property
    def M(self) -> int:
        return self.w_fixed.shape[0]

    @property
    def d(self) -> int:
        return self.w_fixed.shape[1]

    @property
    def N(self) -> int:
        return self.F.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> FeatureBundle:
        return FeatureBundle(int(self.labels[i]), int(self.domains[i]), self.f[i], self.F[i])

    @property
    def samples(self) -> list[FeatureBundle]:
        return [self[i] for i in range(len(self))]

    def validate(self) -> None:
        S = len(self.labels)
        if self.F.shape[0] != S or self.f.shape != (S, self.d) or self.F.shape[2] != self.d:
            raise ContractError("dataset arrays disagree on sample count or feature extent")
        if len(self.domains) != S:
            raise ContractError("domains length differs from sample count")
        if S and (self.labels.min() < 0 or self.labels.max() >= self.M):
            raise ContractError("label outside [0, M)")
        if S and (self.domains.min() < 0 or self.domains.max() >= self.D):
            raise ContractError("domain outside [0, D)")
        if np.any(np.linalg.norm(self.w_fixed, axis=1) == 0):
            raise DegenerateInputError("w_fixed has a zero-norm row")

    def subset(self, mask: np.ndarray) -> FeatureDataset:
        return FeatureDataset(self.w_fixed, self.labels[mask], self.domains[mask],
                              self.f[mask], self.F[mask], self.D)

    def equals(self, other: FeatureDataset) -> bool:
        return (self.D == other.D
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("w_fixed", "labels", "domains", "f", "F")))


@dataclass
class GenSpec:
    d: int = 64
    N: int = 49
    M: int = 10
    D: int = 2
    shots: int = 16
    test_shots: int | None = None
    sigma_class: float = 0.3
    sigma_patch: float = 0.5
    fixed_noise: float = 0.05
    # per-domain style; None draws it from the seed (domain 0 is always identity)
    style_scale: list[list[float]] | None = None
    style_shift: list[list[float]] | None = None
    style_scale_spread: float = 0.4
    style_shift_std: float = 0.25
    train_domains: list[int] | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> GenSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown GenSpec keys: {sorted(unknown)}")
        spec = cls(**raw)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        for name in ("d", "N", "M", "D", "shots"):
            if getattr(self, name) < 1:
                raise ContractError(f"GenSpec.{name} must be positive")
        if min(self.sigma_class, self.sigma_patch, self.fixed_noise,
               self.style_scale_spread, self.style_shift_std) < 0:
            raise ContractError("GenSpec spreads must be non-negative")
        if self.M > self.d:
            raise ContractError(f"M={self.M} classes need d >= M, got d={self.d}")
        for name in ("style_scale", "style_shift"):
            v = getattr(self, name)
            if v is not None and np.asarray(v, dtype=float).shape != (self.D, self.d):
                raise ContractError(f"GenSpec.{name} must be D x d")
        if self.style_scale is not None and np.any(np.asarray(self.style_scale) <= 0):
            raise ContractError("style scales must be strictly positive")
        if self.train_domains is not None and any(not 0 <= t < self.D for t in self.train_domains):
            raise ContractError("train_domains outside [0, D)")


class GeneratedData(NamedTuple):
    train: FeatureDataset
    test: dict[int, FeatureDataset]
    prototypes: np.ndarray


def generate(spec: GenSpec) -> GeneratedData:
    """Draw a train split and one test split per domain, fully determined by ``spec.seed``."""
    spec.validate()
    d, N, M, D = spec.d, spec.N, spec.M, spec.D
    proto_rng, style_rng, bank_rng, train_rng, test_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(5))

    # orthonormal anchors, then a random offset of length sigma_class per class
    q, _ = np.linalg.qr(proto_rng.standard_normal((d, M)))
    anchors = q.T
    offsets = proto_rng.standard_normal((M, d))
    offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
    protos = anchors + spec.sigma_class * offsets

    if spec.style_scale is not None:
        scales = np.asarray(spec.style_scale, dtype=np.float64)
    else:
        scales = np.exp(spec.style_scale_spread * style_rng.standard_normal((D, d)))
        scales[0] = 1.0
    if spec.style_shift is not None:
        shifts = np.asarray(spec.style_shift, dtype=np.float64)
    else:
        shifts = spec.style_shift_std * style_rng.standard_normal((D, d))
        shifts[0] = 0.0

    bank = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    bank = bank + spec.fixed_noise * bank_rng.standard_normal((M, d)) / np.sqrt(d)

    train_domains = range(D) if spec.train_domains is None else spec.train_domains

    def draw(rng, domains, shots) -> FeatureDataset:
        labels, doms, Fs = [], [], []
        for dom in domains:
            for c in range(M):
                noise = spec.sigma_patch * rng.standard_normal((shots, N, d))
                Fs.append((protos[c] + noise) * scales[dom] + shifts[dom])
                labels += [c] * shots
                doms += [dom] * shots
        F = np.concatenate(Fs, axis=0)
        return FeatureDataset(bank, labels, doms, F.mean(axis=1), F, D)

    train = draw(train_rng, train_domains, spec.shots)
    test_shots = spec.shots if spec.test_shots is None else spec.test_shots
    test = {dom: draw(test_rng, [dom], test_shots) for dom in range(D)}
    return GeneratedData(train, test, protos)


def merge(datasets: list[FeatureDataset]) -> FeatureDataset:
    first = datasets[0]
    return FeatureDataset(first.w_fixed,
                          np.concatenate([x.labels for x in datasets]),
                          np.concatenate([x.domains for x in datasets]),
                          np.concatenate([x.f for x in datasets]),
                          np.concatenate([x.F for x in datasets]),
                          max(x.D for x in datasets))


# --------------------------------------------------------------------------
# GFEA v1


def _record_dtype(d: int, N: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("domain", "<u4"), ("f", "<f8", (d,)), ("F", "<f8", (N, d))])


def gfea_size(d: int, N: int, M: int, S: int) -> int:
    return _HEADER.size + 8 * M * d + S * (8 + 8 * d + 8 * N * d)


def encode_features(ds: FeatureDataset) -> bytes:
    S = len(ds)
    header = _HEADER.pack(GFEA_MAGIC, GFEA_VERSION, ds.d, ds.N, ds.M, ds.D, S)
    rec = np.empty(S, dtype=_record_dtype(ds.d, ds.N))
    rec["label"] = ds.labels
    rec["domain"] = ds.domains
    rec["f"] = ds.f
    rec["F"] = ds.F
    return header + ds.w_fixed.astype("<f8").tobytes() + rec.tobytes()


def decode_features(buf: bytes) -> FeatureDataset:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated GFEA header", len(buf))
    magic, version, d, N, M, D, S = _HEADER.unpack_from(buf, 0)
    if magic != GFEA_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {GFEA_MAGIC!r}", 0)
    if version != GFEA_VERSION:
        raise FormatError(f"unsupported GFEA version {version}", 4)
    if min(d, N, M, D) == 0:
        raise FormatError("zero extent in GFEA header", 8)
    off = _HEADER.size
    need = gfea_size(d, N, M, S)
    if len(buf) < need:
        raise FormatError(f"truncated GFEA payload: {len(buf)} of {need} bytes", len(buf))
    if len(buf) > need:
        raise FormatError(f"trailing bytes after GFEA payload ({len(buf) - need})", need)
    w_fixed = np.frombuffer(buf, "<f8", M * d, off).reshape(M, d).astype(np.float64)
    off += 8 * M * d
    rec = np.frombuffer(buf, _record_dtype(d, N), S, off)
    try:
        return FeatureDataset(w_fixed, rec["label"].astype(np.int64), rec["domain"].astype(np.int64),
                              rec["f"].astype(np.float64), rec["F"].astype(np.float64), D)
    except (ContractError, DegenerateInputError) as exc:
        raise FormatError(f"invalid GFEA content: {exc}", off) from None


def write_features(path, ds: FeatureDataset) -> None:
    Path(path).write_bytes(encode_features(ds))


def read_features(path) -> FeatureDataset:
    return decode_features(Path(path).read_bytes())


# --------------------------------------------------------------------------
# domain alignment


def centroid_gap(source, c: int, domains: tuple[int, int], space: str = "first-order") -> float:
    """Euclidean distance between the per-domain centroids of class ``c``.

    ``source`` is a FeatureDataset (first-order space, uses ``f``) or an
    anchor dump exposing ``labels``, ``domains``, ``f`` and ``a_style``.
    """
    if space == "first-order":
        vectors = source.f
    elif space == "anchored":
        vectors = getattr(source, "a_style", None)
        if vectors is None:
            raise ContractError("anchored space needs an anchor dump with a_style")
    else:
        raise ContractError(f"unknown space {space!r}")
    centroids = []
    for dom in domains:
        sel = (source.labels == c) & (source.domains == dom)
        if not np.any(sel):
            raise DegenerateInputError(f"no samples of class {c} in domain {dom}")
        centroids.append(vectors[sel].mean(axis=0))
    return float(np.linalg.norm(centroids[0] - centroids[1]))
