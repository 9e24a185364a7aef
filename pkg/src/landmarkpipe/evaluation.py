"""Recognition GAP and retrieval mAP@k.

GAP (micro average precision): all predictions are pooled and sorted by
score (descending, ties by ascending image id); with ``M`` the number of
test images that have a landmark label,

    GAP = (1/M) * sum_i precision@i * rel(i)

mAP@k averages, over queries with at least one relevant image,

    AP@k = 1/min(|relevant|, k) * sum_{i<=k} precision@i * rel(i)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ValidationError
from .search import RankedList
from .store import _read_csv, check_image_id


@dataclass
class GroundTruth:
    recognition: dict[str, str | None] = field(default_factory=dict)
    retrieval: dict[str, set[str]] = field(default_factory=dict)


def gap(predictions: Iterable[tuple[str, str, float]] | Iterable, truth: GroundTruth | Mapping[str, str | None]) -> float:
    """Global average precision over ``(image, label, score)`` predictions.

    Objects with ``image``/``label``/``score`` attributes are accepted too.
    """
    labels = truth.recognition if isinstance(truth, GroundTruth) else truth
    m = sum(1 for v in labels.values() if v is not None)
    if m == 0:
        raise ValidationError("GAP undefined: no test image has a landmark label")
    rows = []
    seen = set()
    for p in predictions:
        image, label, score = (p.image, p.label, p.score) if hasattr(p, "image") else p
        if image in seen:
            raise ValidationError(f"more than one prediction for image {image!r}")
        seen.add(image)
        rows.append((image, label, float(score)))
    rows.sort(key=lambda r: (-r[2], r[0]))
    correct = 0
    total = 0.0
    for i, (image, label, _) in enumerate(rows, 1):
        expected = labels.get(image)
        if expected is not None and label == expected:
            correct += 1
            total += correct / i
    return total / m


def average_precision_at_k(ranked: Sequence[str], relevant: set[str], k: int = 100) -> float:
    if not relevant:
        raise ValidationError("average precision undefined without relevant items")
    hits = 0
    total = 0.0
    for i, image in enumerate(list(ranked)[:k], 1):
        if image in relevant:
            hits += 1
            total += hits / i
    return total / min(len(relevant), k)


def map_at_k(results: Mapping[str, RankedList | Sequence[str]], truth: GroundTruth | Mapping[str, set[str]], k: int = 100) -> float:
    relevant = truth.retrieval if isinstance(truth, GroundTruth) else truth
    queries = [q for q, rel in relevant.items() if rel]
    if not queries:
        raise ValidationError("mAP undefined: no query has a relevant image")
    total = 0.0
    for q in queries:
        r = results.get(q)
        if r is None:
            continue
        ids = r.ids if isinstance(r, RankedList) else r
        total += average_precision_at_k(ids, relevant[q], k)
    return total / len(queries)


def load_retrieval_truth(source: str | Path) -> dict[str, set[str]]:
    """CSV ``id,images`` with space-separated relevant gallery ids."""
    out: dict[str, set[str]] = {}
    for line, row in _read_csv(source, ("id", "images")):
        q = check_image_id(row["id"])
        if q in out:
            raise ValidationError(f"{source}:{line}: duplicate id {q!r}")
        out[q] = set(row["images"].split())
    return out


def save_retrieval_truth(truth: Mapping[str, Iterable[str]], destination: str | Path) -> None:
    with open(destination, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "images"])
        for q, rel in truth.items():
            w.writerow([q, " ".join(sorted(rel))])


def format_table(rows: Sequence[tuple[str, ...]], header: Sequence[str]) -> str:
    """Aligned plain-text table."""
    cells = [list(header)] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for n, r in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_report_csv(rows: Sequence[tuple], header: Sequence[str], destination: str | Path) -> None:
    with open(destination, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
