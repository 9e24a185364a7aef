"""Verified neighbor reordering, weighted DBA / QE, and category promotion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .errors import ValidationError
from .features import l2_normalize
from .localmatch import DEFAULT_MIN_MATCHES, MatchResult
from .parallel import chunked_map
from .search import RankedList
from .store import EmbeddingSet

Verifier = Callable[[str, str], bool]


@dataclass(frozen=True)
class RerankParams:
    neighbor_depth: int = 300
    dba_base: int = 10
    dba_cap: int = 20
    qe_base: int = 3
    qe_cap: int = 6
    # True: the image itself takes weight slot 0 of the N slots.
    # False: the image gets an extra weight 1.0 and N neighbors follow.
    self_in_window: bool = True

    def __post_init__(self) -> None:
        if self.neighbor_depth < 1:
            raise ValidationError("neighbor_depth must be positive")
        for base, cap, name in ((self.dba_base, self.dba_cap, "dba"), (self.qe_base, self.qe_cap, "qe")):
            if not 1 <= base <= cap:
                raise ValidationError(f"{name}: need 1 <= base ({base}) <= cap ({cap})")
            if self.neighbor_depth < cap:
                raise ValidationError(f"neighbor_depth {self.neighbor_depth} < {name}_cap {cap}")


class Searcher(Protocol):
    dim: int

    def search(self, query: np.ndarray, k: int, exclude: str | None = None, query_id: str = "") -> RankedList: ...


def window_size(m: int, base: int, cap: int) -> int:
    return base if m <= base else min(m, cap)


def linear_weights(n: int) -> np.ndarray:
    return np.array([(n - x) / n for x in range(n)], dtype=np.float64)


def dba_weights(m: int, params: RerankParams = RerankParams()) -> np.ndarray:
    if m < 0:
        raise ValidationError(f"M must be nonnegative, got {m}")
    return linear_weights(window_size(m, params.dba_base, params.dba_cap))


def qe_weights(m: int, params: RerankParams = RerankParams()) -> np.ndarray:
    if m < 0:
        raise ValidationError(f"M must be nonnegative, got {m}")
    return linear_weights(window_size(m, params.qe_base, params.qe_cap))


def stable_partition(ranked: RankedList, keep_first: Callable[[str], bool]) -> tuple[RankedList, int]:
    flags = [bool(keep_first(h)) for h in ranked.ids]
    front = [i for i, f in enumerate(flags) if f]
    back = [i for i, f in enumerate(flags) if not f]
    return ranked.reordered(front + back), len(front)


def verify_neighbors(ranked: RankedList, verifier: Verifier) -> tuple[RankedList, int]:
    """Move verified hits to the front (stable); returns the list and the verified count M."""
    return stable_partition(ranked, lambda h: verifier(ranked.query, h))


def aggregate(descriptors: Sequence[np.ndarray] | np.ndarray, weights: Sequence[float]) -> np.ndarray:
    """Normalized weighted sum over the first ``min(len(descriptors), len(weights))`` items."""
    n = min(len(descriptors), len(weights))
    if len(descriptors) == 0 or n == 0:
        raise ValidationError("aggregate needs at least one descriptor and one weight")
    d = np.asarray(descriptors[:n], dtype=np.float64)
    w = np.asarray(weights[:n], dtype=np.float64)
    return l2_normalize(w @ d).astype(np.float32)


def _augment(
    items: EmbeddingSet,
    source: EmbeddingSet,
    searcher: Searcher,
    verifier: Verifier,
    params: RerankParams,
    weights_for: Callable[[int], np.ndarray],
    exclude_self: bool,
    workers: int,
) -> EmbeddingSet:
    if len(items) == 0:
        return items
    if len(source) == 0:
        return items.with_vectors(np.array([l2_normalize(v) for v in items.vectors], np.float32))
    if items.dim != searcher.dim:
        raise ValidationError(f"dimension mismatch: descriptors {items.dim}, searcher {searcher.dim}")

    def run(a: int, b: int) -> list[np.ndarray]:
        out = []
        for i in range(a, b):
            image_id, vec = items.ids[i], items.vectors[i]
            ranked = searcher.search(vec, params.neighbor_depth, image_id if exclude_self else None, image_id)
            ranked, m = verify_neighbors(ranked, verifier)
            w = weights_for(m)
            neighbors = [source[h] for h in ranked.ids]
            if params.self_in_window:
                seq, weights = [vec] + neighbors, w
            else:
                seq, weights = [vec] + neighbors, np.concatenate([[1.0], w])
            out.append(aggregate(seq, weights))
        return out

    return items.with_vectors(np.array(chunked_map(run, len(items), workers), np.float32))


def run_dba(
    gallery: EmbeddingSet,
    searcher: Searcher,
    verifier: Verifier,
    params: RerankParams = RerankParams(),
    workers: int = 1,
) -> EmbeddingSet:
    """Replace each gallery descriptor by a weighted sum of itself and its verified-first neighbors.

    Every replacement reads the original gallery only.
    """
    return _augment(gallery, gallery, searcher, verifier, params, lambda m: dba_weights(m, params), True, workers)


def run_qe(
    queries: EmbeddingSet,
    gallery: EmbeddingSet,
    searcher: Searcher,
    verifier: Verifier,
    params: RerankParams = RerankParams(),
    workers: int = 1,
) -> EmbeddingSet:
    """Expand queries with their verified-first neighbors from ``gallery`` (searched by ``searcher``)."""
    return _augment(queries, gallery, searcher, verifier, params, lambda m: qe_weights(m, params), False, workers)


def category_promote(ranked: RankedList, gallery_labels: Mapping[str, str], query_label: str | None) -> RankedList:
    if query_label is None:
        return ranked
    return stable_partition(ranked, lambda h: gallery_labels.get(h) == query_label)[0]


# -- verifiers -------------------------------------------------------------


def label_verifier(labels: Mapping[str, str]) -> Verifier:
    """Accept a pair when both images carry the same predicted label."""

    def verify(query: str, candidate: str) -> bool:
        a = labels.get(query)
        return a is not None and a == labels.get(candidate)

    return verify


def local_verifier(matches: Mapping[str, MatchResult], min_matches: int = DEFAULT_MIN_MATCHES) -> Verifier:
    def verify(query: str, candidate: str) -> bool:
        res = matches.get(query)
        return res is not None and res.count(candidate) >= min_matches

    return verify


def combine_verifiers(verifiers: Sequence[Verifier], mode: str = "or") -> Verifier:
    if mode not in ("or", "and"):
        raise ValidationError(f"verifier mode must be 'or' or 'and', got {mode!r}")
    if not verifiers:
        return lambda q, c: False
    if mode == "or":
        return lambda q, c: any(v(q, c) for v in verifiers)
    return lambda q, c: all(v(q, c) for v in verifiers)
