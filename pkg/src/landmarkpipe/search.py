"""Exact and inverted-file nearest-neighbor search over unit-norm descriptors.

Similarity is the inner product. Scores are accumulated in float64 one row at
a time, so the score of a gallery vector does not depend on which other rows
are scanned alongside it; this keeps exact and IVF search bit-identical when
every list is probed. Equal scores are ordered by ascending image id.

IVF1 layout (little-endian)::

    b"IVF1" | u32 k | u32 dim | f64 inertia | k*dim x f32 centroids
            | u32 n_owners | n_owners x ( u16 idlen | id utf-8 )
            | k x ( u32 count | count x ( u32 owner | u32 point | dim x f32 ) )
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .parallel import chunked_map
from .store import EmbeddingSet, LocalDescriptorSet, _encode_id, _Reader

DEFAULT_CENTERS = 512
DEFAULT_NPROBE = 20
DEFAULT_DEPTH = 300


@dataclass
class RankedList:
    query: str
    ids: list[str]
    scores: np.ndarray

    @property
    def hits(self) -> list[tuple[str, float]]:
        return [(i, float(s)) for i, s in zip(self.ids, self.scores)]

    def __len__(self) -> int:
        return len(self.ids)

    def reordered(self, order: Sequence[int]) -> RankedList:
        order = list(order)
        return RankedList(self.query, [self.ids[i] for i in order], self.scores[order])

    def head(self, k: int) -> RankedList:
        return RankedList(self.query, self.ids[:k], self.scores[:k])


def row_scores(matrix64: np.ndarray, q64: np.ndarray) -> np.ndarray:
    """Inner product of each row with ``q``; per-row result is independent of the row count."""
    if matrix64.shape[0] == 0:
        return np.zeros(0, np.float64)
    return np.add.reduce(matrix64 * q64, axis=1)


def id_ranks(ids: Sequence[str]) -> np.ndarray:
    order = sorted(range(len(ids)), key=ids.__getitem__)
    ranks = np.empty(len(ids), dtype=np.int64)
    ranks[order] = np.arange(len(ids))
    return ranks


def top_k(scores: np.ndarray, ranks: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` best scores, ties by ascending rank. ``-inf`` entries are dropped."""
    n = len(scores)
    if n == 0 or k <= 0:
        return np.zeros(0, np.int64)
    if k < n:
        kth = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    cand = cand[scores[cand] > -np.inf]
    order = np.lexsort((ranks[cand], -scores[cand]))[:k]
    return cand[order]


def _as_query(query: np.ndarray, dim: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float32).astype(np.float64)
    if q.shape != (dim,):
        raise ValidationError(f"dimension mismatch: query has shape {q.shape}, expected ({dim},)")
    return q


class ExactSearcher:
    """Brute-force kNN over an :class:`EmbeddingSet` (holds a float64 copy of the gallery)."""

    def __init__(self, gallery: EmbeddingSet):
        self.gallery = gallery
        self._g64 = gallery.vectors.astype(np.float64)
        self._ranks = id_ranks(gallery.ids)

    @property
    def dim(self) -> int:
        return self.gallery.dim

    def search(self, query: np.ndarray, k: int, exclude: str | None = None, query_id: str = "") -> RankedList:
        if k < 1:
            raise ValidationError(f"k must be positive, got {k}")
        q = _as_query(query, self.dim)
        scores = row_scores(self._g64, q)
        if exclude is not None and exclude in self.gallery:
            scores[self.gallery.index_of(exclude)] = -np.inf
        pos = top_k(scores, self._ranks, k)
        return RankedList(query_id, [self.gallery.ids[p] for p in pos], scores[pos])

    def search_set(self, queries: EmbeddingSet, k: int, exclude_self: bool = True, workers: int = 1) -> list[RankedList]:
        def run(a: int, b: int) -> list[RankedList]:
            return [
                self.search(queries.vectors[i], k, queries.ids[i] if exclude_self else None, queries.ids[i])
                for i in range(a, b)
            ]

        return chunked_map(run, len(queries), workers)


def knn_exact(query: np.ndarray, gallery: EmbeddingSet, k: int, exclude: str | None = None) -> RankedList:
    return ExactSearcher(gallery).search(query, k, exclude)


# -- k-means ---------------------------------------------------------------


@dataclass
class Centroids:
    vectors: np.ndarray  # (k, dim) float32
    inertia: float
    history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Exact pairwise squared Euclidean distances, computed by differences (chunked)."""
    p = np.asarray(points, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    out = np.empty((len(p), len(c)), np.float64)
    step = max(1, 4_000_000 // max(1, c.size))
    for s in range(0, len(p), step):
        diff = p[s : s + step, None, :] - c[None, :, :]
        out[s : s + step] = np.add.reduce(diff * diff, axis=2)
    return out


def _fast_assign(x: np.ndarray, x_sq: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = x_sq[:, None] - 2.0 * (x @ c.T) + np.einsum("ij,ij->i", c, c)[None, :]
    return np.argmin(d, axis=1)


def _inertia(x: np.ndarray, c: np.ndarray, assign: np.ndarray) -> float:
    diff = x - c[assign]
    return float(np.einsum("ij,ij->", diff, diff))


def kmeans_fit(points: np.ndarray, k: int, max_iters: int = 25, seed: int = 0) -> Centroids:
    """Lloyd's algorithm from a seeded k-means++ start.

    Empty clusters keep their previous center, which keeps the inertia
    sequence (``Centroids.history``) nonincreasing.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"points must be a 2-d matrix, got shape {x.shape}")
    n = len(x)
    if k < 1:
        raise ValidationError(f"k must be positive, got {k}")
    if n < k:
        raise ValidationError(f"kmeans_fit needs at least k={k} points, got {n}")
    if max_iters < 1:
        raise ValidationError(f"max_iters must be positive, got {max_iters}")
    rng = np.random.default_rng(seed)

    chosen = [int(rng.integers(n))]
    taken = np.zeros(n, bool)
    taken[chosen[0]] = True
    d2 = np.add.reduce((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            cum = np.cumsum(d2)
            idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            idx = min(idx, n - 1)
            if taken[idx] or d2[idx] == 0:
                idx = int(np.flatnonzero(~taken & (d2 > 0))[0])
        else:
            idx = int(rng.choice(np.flatnonzero(~taken)))
        chosen.append(idx)
        taken[idx] = True
        d2 = np.minimum(d2, np.add.reduce((x - x[idx]) ** 2, axis=1))
    c = x[chosen].copy()

    x_sq = np.einsum("ij,ij->i", x, x)
    assign = _fast_assign(x, x_sq, c)
    history = [_inertia(x, c, assign)]
    for _ in range(max_iters):
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        new_c = c.copy()
        new_c[nonempty] = sums[nonempty] / counts[nonempty, None]
        new_assign = _fast_assign(x, x_sq, new_c)
        inertia = _inertia(x, new_c, new_assign)
        # guard against float noise in the expansion-based assignment
        if inertia > history[-1]:
            keep = _inertia(x, new_c, assign)
            if keep <= inertia:
                new_assign, inertia = assign, keep
        c = new_c
        history.append(inertia)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return Centroids(vectors=c.astype(np.float32), inertia=history[-1], history=history)


# -- inverted file ---------------------------------------------------------


@dataclass
class IvfIndex:
    """Points grouped by nearest centroid.

    Entries of list ``c`` occupy rows ``offsets[c]:offsets[c+1]`` of
    ``owner``, ``point`` and ``vectors``.
    """

    centroids: Centroids
    owner_ids: list[str]
    offsets: np.ndarray
    owner: np.ndarray
    point: np.ndarray
    vectors: np.ndarray

    def __post_init__(self) -> None:
        self._v64 = self.vectors.astype(np.float64)
        self._c64 = self.centroids.vectors.astype(np.float64)
        self._ranks = id_ranks(self.owner_ids)
        self._owner_pos = {o: n for n, o in enumerate(self.owner_ids)}
        self._list_rows = [np.arange(a, b) for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    @property
    def dim(self) -> int:
        return self.centroids.dim

    def owner_position(self, owner_id: str | None) -> int:
        return self._owner_pos.get(owner_id, -1) if owner_id is not None else -1

    def posting(self, c: int) -> list[tuple[str, int, np.ndarray]]:
        a, b = self.offsets[c], self.offsets[c + 1]
        return [(self.owner_ids[o], int(p), v) for o, p, v in zip(self.owner[a:b], self.point[a:b], self.vectors[a:b])]

    def probe(self, q64: np.ndarray, nprobe: int) -> np.ndarray:
        return self.probe_many(q64[None, :], nprobe)[0]

    def probe_many(self, q64: np.ndarray, nprobe: int) -> np.ndarray:
        """Nearest ``nprobe`` lists per query row; ties go to the lower list index."""
        d = squared_distances(q64, self._c64)
        return np.argsort(d, axis=1, kind="stable")[:, :nprobe]

    def rows_for(self, lists: np.ndarray) -> np.ndarray:
        parts = [self._list_rows[c] for c in lists]
        return np.concatenate(parts) if parts else np.zeros(0, np.int64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, IvfIndex):
            return NotImplemented
        return (
            self.centroids.vectors.tobytes() == other.centroids.vectors.tobytes()
            and self.centroids.vectors.shape == other.centroids.vectors.shape
            and self.centroids.inertia == other.centroids.inertia
            and self.owner_ids == other.owner_ids
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.owner, other.owner)
            and np.array_equal(self.point, other.point)
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


def ivf_build(gallery: EmbeddingSet | LocalDescriptorSet, centroids: Centroids) -> IvfIndex:
    if gallery.dim != centroids.dim:
        raise ValidationError(f"dimension mismatch: gallery {gallery.dim}, centroids {centroids.dim}")
    if isinstance(gallery, LocalDescriptorSet):
        owner, point, mat = gallery.flatten()
    else:
        owner = np.arange(len(gallery), dtype=np.int64)
        point = np.zeros(len(gallery), np.int64)
        mat = gallery.vectors
    if len(mat):
        d = squared_distances(mat, centroids.vectors)
        assign = np.argmin(d, axis=1)  # first minimum -> lowest centroid index on ties
    else:
        assign = np.zeros(0, np.int64)
    order = np.argsort(assign, kind="stable")
    counts = np.bincount(assign, minlength=centroids.k)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return IvfIndex(
        centroids=centroids,
        owner_ids=list(gallery.ids),
        offsets=offsets,
        owner=owner[order],
        point=point[order],
        vectors=np.ascontiguousarray(np.asarray(mat, np.float32)[order]).reshape(-1, centroids.dim),
    )


def ivf_search(index: IvfIndex, query: np.ndarray, nprobe: int, k: int, exclude: str | None = None, query_id: str = "") -> RankedList:
    """Top-``k`` owners by their best-scoring point within the ``nprobe`` nearest lists."""
    if not 1 <= nprobe <= index.centroids.k:
        raise ValidationError(f"nprobe must be in [1, {index.centroids.k}], got {nprobe}")
    if k < 1:
        raise ValidationError(f"k must be positive, got {k}")
    q = _as_query(query, index.dim)
    rows = index.rows_for(index.probe(q, nprobe))
    scores = row_scores(index._v64[rows], q)
    owners = index.owner[rows]
    excluded = index.owner_position(exclude)
    if excluded >= 0:
        keep = owners != excluded
        rows, scores, owners = rows[keep], scores[keep], owners[keep]
    order = np.lexsort((index.point[rows], index._ranks[owners], -scores))
    _, first = np.unique(owners[order], return_index=True)
    best = order[np.sort(first)][:k]
    return RankedList(query_id, [index.owner_ids[o] for o in owners[best]], scores[best])


class IvfSearcher:
    def __init__(self, index: IvfIndex, nprobe: int = DEFAULT_NPROBE):
        self.index = index
        self.nprobe = min(nprobe, index.centroids.k)

    @property
    def dim(self) -> int:
        return self.index.dim

    def search(self, query: np.ndarray, k: int, exclude: str | None = None, query_id: str = "") -> RankedList:
        return ivf_search(self.index, query, self.nprobe, k, exclude, query_id)

    def search_set(self, queries: EmbeddingSet, k: int, exclude_self: bool = True, workers: int = 1) -> list[RankedList]:
        def run(a: int, b: int) -> list[RankedList]:
            return [
                self.search(queries.vectors[i], k, queries.ids[i] if exclude_self else None, queries.ids[i])
                for i in range(a, b)
            ]

        return chunked_map(run, len(queries), workers)


_IVF_HEADER = struct.Struct("<4sIId")
_U32 = struct.Struct("<I")


def save_ivf(index: IvfIndex, destination: str | Path) -> None:
    c = index.centroids
    parts = [_IVF_HEADER.pack(b"IVF1", c.k, c.dim, float(c.inertia)), c.vectors.astype("<f4").tobytes()]
    parts.append(_U32.pack(len(index.owner_ids)))
    parts.extend(_encode_id(i) for i in index.owner_ids)
    entry = np.dtype([("owner", "<u4"), ("point", "<u4"), ("v", "<f4", (c.dim,))])
    for ci in range(c.k):
        a, b = index.offsets[ci], index.offsets[ci + 1]
        block = np.empty(b - a, entry)
        block["owner"] = index.owner[a:b]
        block["point"] = index.point[a:b]
        block["v"] = index.vectors[a:b]
        parts.append(_U32.pack(b - a))
        parts.append(block.tobytes())
    Path(destination).write_bytes(b"".join(parts))


def load_ivf(source: str | Path) -> IvfIndex:
    r = _Reader(Path(source).read_bytes())
    raw = r.take(_IVF_HEADER.size, "header")
    magic, k, dim, inertia = _IVF_HEADER.unpack(raw)
    if magic != b"IVF1":
        raise FormatError(f"bad magic {magic!r}, expected b'IVF1'", 0)
    if k == 0 or dim == 0:
        raise FormatError("k and dim must be positive", 4)
    cvec = r.floats(k * dim, "centroids").reshape(k, dim)
    n_owners = r.u32("owner count")
    owner_ids = [r.image_id() for _ in range(n_owners)]
    if len(set(owner_ids)) != n_owners:
        raise FormatError("duplicate owner id", r.pos)
    entry = np.dtype([("owner", "<u4"), ("point", "<u4"), ("v", "<f4", (dim,))])
    counts, owners, points, vecs = [], [], [], []
    for ci in range(k):
        count = r.u32(f"size of list {ci}")
        start = r.pos
        block = np.frombuffer(r.take(count * entry.itemsize, f"entries of list {ci}"), entry)
        if count and int(block["owner"].max()) >= n_owners:
            raise FormatError(f"owner index out of range in list {ci}", start)
        counts.append(count)
        owners.append(block["owner"].astype(np.int64))
        points.append(block["point"].astype(np.int64))
        vecs.append(block["v"].astype(np.float32))
    r.finish()
    return IvfIndex(
        centroids=Centroids(vectors=cvec, inertia=inertia),
        owner_ids=owner_ids,
        offsets=np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
        owner=np.concatenate(owners),
        point=np.concatenate(points),
        vectors=np.concatenate(vecs).reshape(-1, dim),
    )
