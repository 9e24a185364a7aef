"""Landmark recognition from retrieval results.

Top-5 kNN voting, a two-stage non-landmark filter (object detector classes,
then similarity to detected non-landmarks), A/B confidence grades, band
rescoring and the frequent-landmark boost.
"""

from __future__ import annotations

import enum
import functools
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .errors import ValidationError
from .search import ExactSearcher, RankedList
from .store import Detection, EmbeddingSet

RESCORE_EPS = 1e-6
BOOST_BASE = 8.0
FILTERED_OFFSET = -1.0

LANDMARK_CLASSES = frozenset({"Building", "Tower", "Castle", "Sculpture", "Skyscraper"})
UNCERTAIN_CLASSES = frozenset({"House", "Tree", "Palm tree", "Watercraft", "Aircraft", "Swimming pool", "Fountain"})


class GradeA(enum.IntEnum):
    A1 = 1
    A2 = 2
    A3 = 3
    A4 = 4


class GradeB(enum.IntEnum):
    B1 = 1
    B2 = 2


@functools.total_ordering
@dataclass(frozen=True)
class Grade:
    a: GradeA
    b: GradeB

    @property
    def band(self) -> int:
        """0 for A1B1 through 7 for A4B2."""
        return 2 * (int(self.a) - 1) + (int(self.b) - 1)

    @property
    def offset(self) -> int:
        return 7 - self.band

    def __str__(self) -> str:
        return f"{self.a.name}{self.b.name}"

    @classmethod
    def parse(cls, text: str) -> Grade:
        try:
            return cls(GradeA[text[:2]], GradeB[text[2:]])
        except KeyError:
            raise ValidationError(f"unknown grade {text!r}") from None

    def __lt__(self, other: Grade) -> bool:
        return self.band > other.band


ALL_GRADES = [Grade(a, b) for a in GradeA for b in GradeB]


@dataclass(frozen=True)
class Prediction:
    image: str
    label: str
    score: float
    grade: Grade | None = None
    filtered: bool = False


@dataclass(frozen=True)
class ClassPartition:
    landmark: frozenset[str] = LANDMARK_CLASSES
    uncertain: frozenset[str] = UNCERTAIN_CLASSES

    def __post_init__(self) -> None:
        both = self.landmark & self.uncertain
        if both:
            raise ValidationError(f"classes in both landmark and uncertain parts: {sorted(both)}")


@dataclass(frozen=True)
class FilterParams:
    det_score_threshold: float = 0.3
    area_ratio_threshold: float = 0.6
    sim_filter_threshold: float = 0.85
    sim_filter_topk: int = 3

    def __post_init__(self) -> None:
        for name in ("det_score_threshold", "area_ratio_threshold", "sim_filter_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0,1], got {v}")
        if self.sim_filter_topk < 1:
            raise ValidationError("sim_filter_topk must be positive")


@dataclass(frozen=True)
class GradeParams:
    a1_min_score: float = 0.9
    a2_max_score: float = 0.85
    max_labels: int = 2


def _labeled(hits: RankedList | Sequence[tuple[str, float]], labels: Mapping[str, str]) -> list[tuple[str, float]]:
    pairs = hits.hits if isinstance(hits, RankedList) else list(hits)
    if not pairs:
        raise ValidationError("voting needs at least one hit")
    try:
        return [(labels[h], float(s)) for h, s in pairs]
    except KeyError as exc:
        raise ValidationError(f"hit {exc.args[0]!r} has no gallery label") from None


def _vote(labeled: list[tuple[str, float]]) -> tuple[str, float]:
    counts: Counter[str] = Counter()
    best: dict[str, float] = {}
    for label, score in labeled:
        counts[label] += 1
        best[label] = max(best.get(label, -math.inf), score)
    label = min(counts, key=lambda lab: (-counts[lab], -best[lab], lab))
    return label, best[label]


def vote_top5(hits: RankedList | Sequence[tuple[str, float]], gallery_labels: Mapping[str, str], k: int = 5) -> Prediction:
    """Majority label among the top ``k`` hits, scored by its best hit.

    Count ties go to the higher best score, then the smaller label.
    """
    labeled = _labeled(hits, gallery_labels)[:k]
    label, score = _vote(labeled)
    query = hits.query if isinstance(hits, RankedList) else ""
    return Prediction(query, label, score)


def retrieval_recognize(
    hits: RankedList | Sequence[tuple[str, float]],
    gallery_labels: Mapping[str, str],
    threshold: float = 0.85,
    k: int = 5,
    max_labels: int = 2,
) -> Prediction | None:
    labeled = _labeled(hits, gallery_labels)[:k]
    distinct = {lab for lab, _ in labeled}
    if len(distinct) <= max_labels and max(s for _, s in labeled) > threshold:
        return vote_top5(hits, gallery_labels, k)
    return None


class DetectorVerdict(enum.Enum):
    LANDMARK = "landmark"
    NON_LANDMARK_CANDIDATE = "non_landmark_candidate"
    UNKNOWN = "unknown"


def detector_filter(
    dets: Iterable[Detection], partition: ClassPartition = ClassPartition(), params: FilterParams = FilterParams()
) -> DetectorVerdict:
    dets = list(dets)
    if any(d.cls in partition.landmark for d in dets):
        return DetectorVerdict.LANDMARK
    for d in dets:
        if d.cls in partition.landmark or d.cls in partition.uncertain:
            continue
        if d.score > params.det_score_threshold and d.area > params.area_ratio_threshold:
            return DetectorVerdict.NON_LANDMARK_CANDIDATE
    return DetectorVerdict.UNKNOWN


def similarity_filter(test: EmbeddingSet, seeds: EmbeddingSet, params: FilterParams = FilterParams()) -> set[str]:
    """Ids whose ``topk`` most similar seeds all score above the threshold.

    An image is never compared with itself; if fewer than ``topk`` other
    seeds remain it is not filtered by this rule.
    """
    k = params.sim_filter_topk
    if len(seeds) < k:
        raise ValidationError(f"similarity filter needs at least {k} seeds, got {len(seeds)}")
    if test.dim != seeds.dim:
        raise ValidationError(f"dimension mismatch: test {test.dim}, seeds {seeds.dim}")
    searcher = ExactSearcher(seeds)
    out = set()
    for image_id, vec in test.items():
        ranked = searcher.search(vec, k, exclude=image_id)
        if len(ranked) == k and float(ranked.scores.min()) > params.sim_filter_threshold:
            out.add(image_id)
    return out


def grade_a(hits: RankedList | Sequence[tuple[str, float]], gallery_labels: Mapping[str, str], params: GradeParams = GradeParams(), k: int = 5) -> GradeA:
    labeled = _labeled(hits, gallery_labels)[:k]
    label, _ = _vote(labeled)
    distinct = len({lab for lab, _ in labeled})
    mine = [s for lab, s in labeled if lab == label]
    if distinct <= params.max_labels and min(mine) > params.a1_min_score:
        return GradeA.A1
    if distinct <= params.max_labels and max(mine) > params.a2_max_score:
        return GradeA.A2
    if len(labeled) == k and distinct == k:
        return GradeA.A4
    return GradeA.A3


def grade_b(retrieval_pred: Prediction | None, classifier_pred: Prediction | None) -> GradeB:
    if retrieval_pred is None or classifier_pred is None:
        return GradeB.B2
    return GradeB.B1 if retrieval_pred.label == classifier_pred.label else GradeB.B2


def rescore(grade: Grade, base_score: float) -> float:
    """Map a graded score into its band ``[offset, offset + 1)``, offset 7 for A1B1 down to 0 for A4B2."""
    base = min(1.0, max(-1.0, float(base_score)))
    return grade.offset + (base + 1.0) / 2.0 * (1.0 - RESCORE_EPS)


def filtered_score(base_score: float) -> float:
    """Score band for images judged non-landmark: below every graded band."""
    base = min(1.0, max(-1.0, float(base_score)))
    return FILTERED_OFFSET + (base + 1.0) / 2.0 * (1.0 - RESCORE_EPS)


def frequent_set(predictions: Iterable[Prediction], min_count: float = 5) -> set[str]:
    """Labels occurring strictly more than ``min_count`` times."""
    counts = Counter(p.label for p in predictions)
    return {lab for lab, c in counts.items() if c > min_count}


def label_counts(predictions: Iterable[Prediction]) -> dict[str, int]:
    return dict(Counter(p.label for p in predictions))


_EXTENDED_BANDS = {str(g): 5 - g.band for g in ALL_GRADES if g.band <= 5}


def frequency_rescore(
    predictions: Sequence[Prediction],
    frequent: set[str],
    counts: Mapping[str, int],
    mode: str = "stage_a1a2",
) -> list[Prediction]:
    """Lift graded predictions of frequent labels above every band.

    ``stage_a1a2`` boosts grades A1/A2 to ``8 + c/(c+1)``; ``extended`` boosts
    A1B1..A3B2 to ``8 + (5 - band) + c/(c+1)`` so boosted images keep their
    grade order. ``c`` is the label's count.
    """
    if mode not in ("stage_a1a2", "extended"):
        raise ValidationError(f"unknown frequency mode {mode!r}")
    out = []
    for p in predictions:
        if p.grade is None or p.filtered or p.label not in frequent:
            out.append(p)
            continue
        c = counts.get(p.label, 0)
        freq = c / (c + 1)
        if mode == "stage_a1a2":
            if p.grade.a in (GradeA.A1, GradeA.A2):
                p = replace(p, score=BOOST_BASE + freq)
        else:
            sub = _EXTENDED_BANDS.get(str(p.grade))
            if sub is not None:
                p = replace(p, score=BOOST_BASE + sub + freq)
        out.append(p)
    return out


@dataclass
class RecognitionParams:
    vote_k: int = 5
    retrieval_threshold: float = 0.85
    grades: GradeParams = field(default_factory=GradeParams)
    frequent_min_count: int = 5
    frequency_mode: str = "stage_a1a2"
    drop_filtered: bool = False


def grade_and_rescore(
    ranked: Sequence[RankedList],
    train_labels: Mapping[str, str],
    classifier: Mapping[str, Prediction],
    filtered: set[str],
    params: RecognitionParams = RecognitionParams(),
    use_b: bool = True,
    use_frequency: bool = True,
) -> list[Prediction]:
    """Turn per-image top-k retrieval results into graded, rescored predictions."""
    preds = []
    for r in ranked:
        if len(r) == 0:
            continue
        base = vote_top5(r, train_labels, params.vote_k)
        if r.query in filtered:
            preds.append(replace(base, score=filtered_score(base.score), filtered=True))
            continue
        a = grade_a(r, train_labels, params.grades, params.vote_k)
        b = grade_b(base, classifier.get(r.query)) if use_b else GradeB.B1
        g = Grade(a, b)
        preds.append(replace(base, grade=g, score=rescore(g, base.score)))
    if use_frequency:
        top = [p for p in preds if p.grade == Grade(GradeA.A1, GradeB.B1)]
        w = frequent_set(top, params.frequent_min_count)
        preds = frequency_rescore(preds, w, label_counts(top), params.frequency_mode)
    return preds
