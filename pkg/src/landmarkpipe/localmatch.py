"""Local-descriptor matching through an IVF index.

Each query point probes its ``nprobe`` nearest lists and keeps the single
best indexed point; if that similarity reaches ``sim_threshold`` the point's
owner image is credited one match.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .parallel import chunked_map
from .search import IvfIndex, row_scores
from .store import LocalDescriptorSet, check_image_id

DEFAULT_SIM_THRESHOLD = 0.85
DEFAULT_MIN_MATCHES = 10


@dataclass
class MatchResult:
    query: str
    counts: dict[str, int] = field(default_factory=dict)

    def count(self, candidate: str) -> int:
        return self.counts.get(candidate, 0)


def match_images(
    query_points: np.ndarray | Sequence[np.ndarray],
    index: IvfIndex,
    nprobe: int,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
    query_id: str = "",
    exclude_owner: str | None = None,
) -> MatchResult:
    """Count top-1 matches per indexed image.

    ``exclude_owner`` drops one owner's points from consideration, which is
    how a gallery image is matched against an index that contains it.
    """
    if not 0.0 <= sim_threshold <= 1.0:
        raise ValidationError(f"sim_threshold must be in [0,1], got {sim_threshold}")
    if not 1 <= nprobe <= index.centroids.k:
        raise ValidationError(f"nprobe must be in [1, {index.centroids.k}], got {nprobe}")
    pts = np.asarray(query_points, dtype=np.float32)
    result = MatchResult(query_id)
    if pts.size == 0:
        return result
    pts = pts.reshape(len(pts), -1)
    if pts.shape[1] != index.dim:
        raise ValidationError(f"dimension mismatch: query points {pts.shape[1]}, index {index.dim}")
    excluded = index.owner_position(exclude_owner)
    pts64 = pts.astype(np.float64)
    probes = index.probe_many(pts64, nprobe)
    for p, lists in zip(pts64, probes):
        rows = index.rows_for(lists)
        if excluded >= 0:
            rows = rows[index.owner[rows] != excluded]
        if not len(rows):
            continue
        scores = row_scores(index._v64[rows], p)
        top = scores.max()
        if top < sim_threshold:
            continue
        tied = rows[scores == top]
        if len(tied) > 1:
            # equal similarity: smallest owner id, then smallest point index
            tied = tied[np.lexsort((index.point[tied], index._ranks[index.owner[tied]]))]
        owner = index.owner_ids[index.owner[tied[0]]]
        result.counts[owner] = result.counts.get(owner, 0) + 1
    return result


def match_all(
    local: LocalDescriptorSet,
    index: IvfIndex,
    nprobe: int,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
    exclude_self: bool = True,
    workers: int = 1,
) -> dict[str, MatchResult]:
    if local.dim != index.dim:
        raise ValidationError(f"dimension mismatch: local descriptors {local.dim}, index {index.dim}")

    def run(a: int, b: int) -> list[MatchResult]:
        return [
            match_images(local.points[i], index, nprobe, sim_threshold, local.ids[i], local.ids[i] if exclude_self else None)
            for i in range(a, b)
        ]

    return {r.query: r for r in chunked_map(run, len(local), workers, chunk=16)}


def verify_pair(result: MatchResult, candidate: str, min_matches: int = DEFAULT_MIN_MATCHES) -> bool:
    return result.count(candidate) >= min_matches


def save_matches(results: Iterable[MatchResult], destination: str | Path) -> None:
    with open(destination, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "candidate_id", "match_count"])
        for r in results:
            for cand in sorted(r.counts):
                w.writerow([r.query, cand, r.counts[cand]])


def load_matches(source: str | Path) -> dict[str, MatchResult]:
    out: dict[str, MatchResult] = {}
    with open(source, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"query_id", "candidate_id", "match_count"} - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"{source}: missing column(s) {', '.join(sorted(missing))}")
        for row in reader:
            q = check_image_id(row["query_id"])
            c = check_image_id(row["candidate_id"])
            try:
                n = int(row["match_count"])
            except ValueError:
                raise ValidationError(f"{source}:{reader.line_num}: bad match_count {row['match_count']!r}") from None
            if n < 0:
                raise ValidationError(f"{source}:{reader.line_num}: negative match_count")
            res = out.setdefault(q, MatchResult(q))
            if c in res.counts:
                raise ValidationError(f"{source}:{reader.line_num}: duplicate pair ({q}, {c})")
            res.counts[c] = n
    return out
