"""Pairwise scores on fc7 embeddings and the provider registry.

A provider is anything that scores a pair: the built-in formulas below act
on embedding vectors, table providers look a precomputed score up by pair id
(external methods loaded from score files, or the trained Siamese distance).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DataError, DimensionError, ProviderError, UsageError
from .tensor import l2_normalize

DISTANCE = "distance"
SIMILARITY = "similarity"


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def euclidean(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.linalg.norm(a - b))


def l2norm_euclidean(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.linalg.norm(l2_normalize(a) - l2_normalize(b)))


def _as_distribution(v: np.ndarray) -> np.ndarray:
    total = v.sum()
    if total == 0.0:
        return np.full(v.shape, 1.0 / v.size)
    return v / total


def hellinger(a, b) -> float:
    """Hellinger distance after rescaling each vector to unit L1 mass."""
    a, b = _pair(a, b)
    for name, v in (("a", a), ("b", b)):
        neg = np.flatnonzero(v < 0)
        if neg.size:
            raise DataError(f"hellinger: negative entry in {name} at index {int(neg[0])}")
    p, q = _as_distribution(a), _as_distribution(b)
    d = np.linalg.norm(np.sqrt(p) - np.sqrt(q)) / np.sqrt(2.0)
    return float(min(d, 1.0))


def cosine(a, b) -> float:
    a, b = _pair(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class Provider:
    id: str
    orientation: str
    score: Callable  # (a, b, pair_id) -> float
    symmetric: bool = True

    def __call__(self, a, b, pair_id: str | None = None) -> float:
        try:
            value = float(self.score(a, b, pair_id))
        except ProviderError:
            raise
        except Exception as exc:
            raise ProviderError(self.id, str(exc)) from exc
        if not np.isfinite(value):
            raise ProviderError(self.id, f"non-finite score for pair {pair_id!r}")
        return value


def _builtin(fid: str, fn, orientation: str) -> Provider:
    return Provider(fid, orientation, lambda a, b, _pid: fn(a, b))


def table_provider(pid: str, scores: Mapping[str, float], orientation: str = DISTANCE) -> Provider:
    """Provider backed by a pair-id -> score table."""
    table = dict(scores)

    def lookup(_a, _b, pair_id):
        if pair_id is None:
            raise KeyError("table provider needs a pair id")
        if pair_id not in table:
            raise KeyError(f"no score for pair {pair_id!r}")
        return table[pair_id]

    return Provider(pid, orientation, lookup)


BUILTINS: dict[str, Provider] = {
    "euclid": _builtin("euclid", euclidean, DISTANCE),
    "l2euclid": _builtin("l2euclid", l2norm_euclidean, DISTANCE),
    "hellinger": _builtin("hellinger", hellinger, DISTANCE),
    "cosine": _builtin("cosine", cosine, SIMILARITY),
}

# Numeric ids are the conventional method numbers used in feature strings.
NUMERIC_IDS = {
    "1": "euclid",
    "2": "l2euclid",
    "3": "hellinger",
    "4": "ext:sub-sml",
    "5": "ext:oss",
    "6": "cosine",
    "7": "ext:joint-bayesian",
    "8": "ext:carc-nt",
    "9": "ext:hdlbp",
    "15": "siamese",
}


class ProviderRegistry:
    """Ordered id -> Provider map; built-ins are always present."""

    def __init__(self, extra: Sequence[Provider] = ()):
        self._providers: dict[str, Provider] = dict(BUILTINS)
        for p in extra:
            self.register(p)

    def register(self, provider: Provider) -> None:
        if provider.orientation not in (DISTANCE, SIMILARITY):
            raise ValueError(f"bad orientation {provider.orientation!r}")
        self._providers[provider.id] = provider

    def __contains__(self, pid: str) -> bool:
        return pid in self._providers

    def get(self, pid: str) -> Provider:
        try:
            return self._providers[pid]
        except KeyError:
            raise UsageError(f"unknown provider {pid!r}; known: {self.known()}") from None

    def known(self) -> list[str]:
        return sorted(set(self._providers) | set(NUMERIC_IDS) | set(NUMERIC_IDS.values()))

    def orientation(self, pid: str) -> str:
        return self.get(pid).orientation


def parse_feature_string(spec: str) -> list[str]:
    """'1+2+3+6' -> ['euclid', 'l2euclid', 'hellinger', 'cosine']; names pass through."""
    spec = spec.strip()
    if not spec:
        return []
    ids = []
    for tok in spec.split("+"):
        tok = tok.strip()
        if tok.isdigit():
            if tok not in NUMERIC_IDS:
                raise UsageError(f"unknown provider id {tok!r}; known numeric ids: {sorted(NUMERIC_IDS, key=int)}")
            tok = NUMERIC_IDS[tok]
        elif not (tok in BUILTINS or tok == "siamese" or tok.startswith("ext:")):
            raise UsageError(f"unknown provider id {tok!r}; known: {sorted(BUILTINS) + ['siamese', 'ext:<name>']}")
        ids.append(tok)
    return ids


@dataclass(frozen=True)
class ExternalScoreVector:
    scores: np.ndarray
    provider_ids: tuple[str, ...]
    orientations: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.provider_ids)


def build_score_vector(a, b, providers: Sequence[Provider], pair_id: str | None = None) -> ExternalScoreVector:
    if not providers:
        raise ValueError("need at least one provider")
    scores = np.array([p(a, b, pair_id) for p in providers], dtype=np.float64)
    return ExternalScoreVector(scores, tuple(p.id for p in providers), tuple(p.orientation for p in providers))


def score_matrix(emb_a: np.ndarray, emb_b: np.ndarray, providers: Sequence[Provider], pair_ids=None) -> np.ndarray:
    """Stack score vectors for many pairs into an (n_pairs, n_providers) array."""
    n = len(emb_a)
    if pair_ids is None:
        pair_ids = [None] * n
    out = np.empty((n, len(providers)))
    for i in range(n):
        out[i] = build_score_vector(emb_a[i], emb_b[i], providers, pair_ids[i]).scores
    return out
