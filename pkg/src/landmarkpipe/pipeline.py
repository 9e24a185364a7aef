"""Stage logic for the retrieval and recognition pipelines, and the resumable file-based runner.

:class:`Engine` holds the in-memory stage functions; :func:`run_pipeline`
persists every stage output under the run directory and records a digest of
each stage's inputs and parameters in ``stages.json`` so that an identical
rerun skips completed stages.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import PipelineConfig
from .errors import StageError, ValidationError
from .evaluation import GroundTruth, format_table, gap, load_retrieval_truth, map_at_k, write_report_csv
from .features import concat_descriptors, load_pca, pca_apply_set, pca_fit, save_pca
from .localmatch import MatchResult, load_matches, match_all, save_matches
from .recognition import (
    ClassPartition,
    DetectorVerdict,
    Grade,
    Prediction,
    detector_filter,
    filtered_score,
    grade_and_rescore,
    retrieval_recognize,
    similarity_filter,
    vote_top5,
)
from .rerank import (
    Verifier,
    category_promote,
    combine_verifiers,
    label_verifier,
    local_verifier,
    run_dba,
    run_qe,
    verify_neighbors,
)
from .search import ExactSearcher, IvfIndex, RankedList, ivf_build, kmeans_fit, load_ivf, save_ivf
from .store import (
    Detection,
    EmbeddingSet,
    LocalDescriptorSet,
    load_detections,
    load_embeddings,
    load_labels,
    load_local,
    load_optional_labels,
    load_scored_labels,
    save_embeddings,
    save_scored_labels,
    write_recognition_submission,
    write_retrieval_submission,
)

log = logging.getLogger(__name__)


def save_ranked(ranked: Sequence[RankedList], destination: str | Path) -> None:
    with open(destination, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "rank", "gallery_id", "score"])
        for r in ranked:
            for n, (g, s) in enumerate(zip(r.ids, r.scores), 1):
                w.writerow([r.query, n, g, repr(float(s))])


def load_ranked(source: str | Path, queries: Sequence[str]) -> list[RankedList]:
    rows: dict[str, list[tuple[int, str, float]]] = {q: [] for q in queries}
    with open(source, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["query_id"] not in rows:
                raise ValidationError(f"{source}: unexpected query {row['query_id']!r}")
            rows[row["query_id"]].append((int(row["rank"]), row["gallery_id"], float(row["score"])))
    out = []
    for q in queries:
        hits = sorted(rows[q])
        out.append(RankedList(q, [h[1] for h in hits], np.array([h[2] for h in hits], np.float64)))
    return out


def save_predictions(preds: Sequence[Prediction], destination: str | Path) -> None:
    with open(destination, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "score", "grade", "filtered"])
        for p in preds:
            w.writerow([p.image, p.label, repr(float(p.score)), "" if p.grade is None else str(p.grade), int(p.filtered)])


def load_predictions(source: str | Path) -> list[Prediction]:
    out = []
    with open(source, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            grade = Grade.parse(row["grade"]) if row.get("grade") else None
            out.append(Prediction(row["id"], row["label"], float(row["score"]), grade, row.get("filtered") == "1"))
    return out


def as_predictions(scored: Mapping[str, tuple[str, float]]) -> dict[str, Prediction]:
    return {i: Prediction(i, lab, s) for i, (lab, s) in scored.items()}


@dataclass
class RecognitionResult:
    stages: dict[str, list[Prediction]]
    filter_report: list[tuple[str, str, str]]
    final: list[Prediction]


class Engine:
    """In-memory pipeline stages driven by a :class:`PipelineConfig`."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg

    # retrieval ------------------------------------------------------------

    def concat(self, sets: Sequence[EmbeddingSet]) -> EmbeddingSet:
        return concat_descriptors(sets, self.cfg.pca.renormalize_concat)

    def fit_pca(self, gallery: EmbeddingSet):
        return pca_fit(gallery, self.cfg.pca.out_dim, self.cfg.pca.whiten)

    def build_local_index(self, local: LocalDescriptorSet) -> IvfIndex:
        _, _, mat = local.flatten()
        if len(mat) == 0:
            raise ValidationError("cannot build a local index without points")
        k = min(self.cfg.ivf.k, len(mat))
        cents = kmeans_fit(mat, k, self.cfg.ivf.max_iters, self.cfg.seed)
        return ivf_build(local, cents)

    def match(self, local: LocalDescriptorSet, index: IvfIndex, exclude_self: bool) -> dict[str, MatchResult]:
        nprobe = min(self.cfg.ivf.nprobe, index.centroids.k)
        return match_all(local, index, nprobe, self.cfg.local.sim_threshold, exclude_self, self.cfg.workers)

    def verifier(self, labels: Mapping[str, str] | None, matches: Mapping[str, MatchResult] | None) -> Verifier:
        rc = self.cfg.rerank
        parts = []
        if rc.use_classifier and labels is not None:
            parts.append(label_verifier(labels))
        if rc.use_local and matches is not None:
            parts.append(local_verifier(matches, self.cfg.local.min_matches))
        return combine_verifiers(parts, rc.verifier)

    def final_verifier(self, labels: Mapping[str, str] | None, matches: Mapping[str, MatchResult] | None) -> Verifier:
        mode = self.cfg.rerank.final_verifier
        if mode == "combined":
            return self.verifier(labels, matches)
        if mode == "local" and matches is not None:
            return local_verifier(matches, self.cfg.local.min_matches)
        return combine_verifiers([])

    def search(self, queries: EmbeddingSet, gallery: EmbeddingSet, k: int | None = None) -> list[RankedList]:
        return ExactSearcher(gallery).search_set(queries, k or self.cfg.retrieval_k, exclude_self=False, workers=self.cfg.workers)

    def dba(self, gallery: EmbeddingSet, verifier: Verifier) -> EmbeddingSet:
        return run_dba(gallery, ExactSearcher(gallery), verifier, self.cfg.rerank.params(), self.cfg.workers)

    def qe(self, queries: EmbeddingSet, gallery: EmbeddingSet, verifier: Verifier) -> EmbeddingSet:
        return run_qe(queries, gallery, ExactSearcher(gallery), verifier, self.cfg.rerank.params(), self.cfg.workers)

    def rerank(
        self,
        ranked: Sequence[RankedList],
        verifier: Verifier,
        categories: Mapping[str, str] | None,
    ) -> list[RankedList]:
        """Verified hits first, then same-category hits first (the later partition dominates)."""
        out = []
        for r in ranked:
            r, _ = verify_neighbors(r, verifier)
            if categories is not None and self.cfg.rerank.category_promote:
                r = category_promote(r, categories, categories.get(r.query))
            out.append(r)
        return out

    def knn_votes(self, emb: EmbeddingSet, train: EmbeddingSet, train_labels: Mapping[str, str]) -> dict[str, Prediction]:
        k = self.cfg.recognition.vote_k
        return {r.query: vote_top5(r, train_labels, k) for r in self.search(emb, train, k) if len(r)}

    def categories(self, emb: EmbeddingSet, train: EmbeddingSet, train_labels: Mapping[str, str]) -> dict[str, str]:
        rc = self.cfg.recognition
        out = {}
        for r in self.search(emb, train, rc.vote_k):
            if len(r):
                p = retrieval_recognize(r, train_labels, rc.retrieval_threshold, rc.vote_k)
                if p is not None:
                    out[r.query] = p.label
        return out

    # recognition ----------------------------------------------------------

    def detect_filter(
        self,
        test: EmbeddingSet,
        detections: Mapping[str, Sequence[Detection]] | None,
    ) -> tuple[set[str], list[tuple[str, str, str]]]:
        """Two-stage non-landmark filter; returns filtered ids and report rows ``(id, stage, reason)``."""
        params = self.cfg.filter.params()
        partition = ClassPartition()
        if detections is None:
            return set(), []
        verdicts = {i: detector_filter(detections.get(i, ()), partition, params) for i in test.ids}
        seeds = [i for i in test.ids if verdicts[i] is DetectorVerdict.NON_LANDMARK_CANDIDATE]
        report = [(i, "detector", "non_landmark_object") for i in seeds]
        filtered = set(seeds)
        if len(seeds) >= params.sim_filter_topk:
            rest = [i for i in test.ids if verdicts[i] is DetectorVerdict.UNKNOWN]
            hit = similarity_filter(test.subset(rest), test.subset(seeds), params)
            for i in rest:
                if i in hit:
                    report.append((i, "similarity", f"top{params.sim_filter_topk}_min_above_{params.sim_filter_threshold}"))
                    filtered.add(i)
        return filtered, report

    def recognize(
        self,
        test: EmbeddingSet,
        train: EmbeddingSet,
        train_labels: Mapping[str, str],
        classifier: Mapping[str, Prediction],
        detections: Mapping[str, Sequence[Detection]] | None,
    ) -> RecognitionResult:
        params = self.cfg.recognition.params()
        ranked = [r for r in self.search(test, train, params.vote_k) if len(r)]
        vote = [vote_top5(r, train_labels, params.vote_k) for r in ranked]
        filtered, report = self.detect_filter(test, detections)
        with_filter = [replace(p, score=filtered_score(p.score), filtered=True) if p.image in filtered else p for p in vote]
        graded_a = grade_and_rescore(ranked, train_labels, classifier, filtered, params, use_b=False, use_frequency=False)
        graded_ab = grade_and_rescore(ranked, train_labels, classifier, filtered, params, use_b=True, use_frequency=False)
        final = grade_and_rescore(ranked, train_labels, classifier, filtered, params, use_b=True, use_frequency=True)
        stages = {
            "vote": vote,
            "vote_filter": with_filter,
            "grade_a": graded_a,
            "grade_ab": graded_ab,
            "grade_ab_frequency": final,
        }
        return RecognitionResult(stages, report, final)


# -- file-based runner -----------------------------------------------------


def _file_digest(path: Path, cache: dict[Path, str]) -> str:
    if path not in cache:
        h = hashlib.sha256()
        with open(path, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                h.update(block)
        cache[path] = h.hexdigest()
    return cache[path]


@dataclass
class Runner:
    cfg: PipelineConfig
    force: bool = False
    manifest: dict[str, str] = field(default_factory=dict)
    executed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    _hashes: dict[Path, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.out = self.cfg.out
        self.out.mkdir(parents=True, exist_ok=True)
        mpath = self.out / "stages.json"
        if mpath.exists() and not self.force:
            self.manifest = json.loads(mpath.read_text())

    def path(self, name: str) -> Path:
        return self.out / name

    def stage(self, name: str, inputs: Sequence[Path], params: object, outputs: Sequence[Path], fn: Callable[[], None]) -> None:
        h = hashlib.sha256(name.encode())
        h.update(json.dumps(params, sort_keys=True, default=str).encode())
        for p in inputs:
            h.update(_file_digest(Path(p), self._hashes).encode())
        digest = h.hexdigest()
        if not self.force and self.manifest.get(name) == digest and all(Path(o).exists() for o in outputs):
            log.info("stage %s: up to date", name)
            self.skipped.append(name)
            return
        log.info("stage %s: running", name)
        try:
            fn()
        except Exception as exc:  # noqa: BLE001 - rewrapped with stage context
            raise StageError(name, digest, exc) from exc
        for o in outputs:
            self._hashes.pop(Path(o), None)
        self.manifest[name] = digest
        self.executed.append(name)
        (self.out / "stages.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


def run_pipeline(cfg: PipelineConfig, force: bool = False) -> Runner:
    """Run every stage the configured inputs allow; returns the runner (stage bookkeeping)."""
    cfg.validate(check_paths=True)
    eng = Engine(cfg)
    run = Runner(cfg, force)
    d = cfg.data
    P = run.path
    (run.out / "effective_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    roles = {"index": d.index, "query": d.query}
    if d.train:
        roles["train"] = d.train

    for role, paths in roles.items():
        src = [cfg.resolve(p) for p in paths]

        def do_concat(src=src, role=role) -> None:
            save_embeddings(eng.concat([load_embeddings(p) for p in src]), P(f"concat.{role}.emb"))

        run.stage(f"concat.{role}", src, {"renormalize": cfg.pca.renormalize_concat}, [P(f"concat.{role}.emb")], do_concat)

    run.stage(
        "pca_fit",
        [P("concat.index.emb")],
        {"out_dim": cfg.pca.out_dim, "whiten": cfg.pca.whiten},
        [P("pca.pca1")],
        lambda: save_pca(eng.fit_pca(load_embeddings(P("concat.index.emb"))), P("pca.pca1")),
    )
    for role in roles:

        def do_apply(role=role) -> None:
            save_embeddings(pca_apply_set(load_pca(P("pca.pca1")), load_embeddings(P(f"concat.{role}.emb"))), P(f"pca.{role}.emb"))

        run.stage(f"pca_apply.{role}", [P("pca.pca1"), P(f"concat.{role}.emb")], {}, [P(f"pca.{role}.emb")], do_apply)

    has_local = d.index_local is not None
    if has_local:
        iloc, qloc = cfg.resolve(d.index_local), cfg.resolve(d.query_local)
        run.stage(
            "ivf_build",
            [iloc],
            {"k": cfg.ivf.k, "iters": cfg.ivf.max_iters, "seed": cfg.seed},
            [P("local.ivf1")],
            lambda: save_ivf(eng.build_local_index(load_local(iloc)), P("local.ivf1")),
        )
        for role, src, excl in (("index", iloc, True), ("query", qloc, False)):

            def do_match(src=src, excl=excl, role=role) -> None:
                res = eng.match(load_local(src), load_ivf(P("local.ivf1")), excl)
                save_matches(res.values(), P(f"matches.{role}.csv"))

            run.stage(
                f"local_match.{role}",
                [src, P("local.ivf1")],
                {"nprobe": cfg.ivf.nprobe, "sim": cfg.local.sim_threshold},
                [P(f"matches.{role}.csv")],
                do_match,
            )

    train_labels_path = cfg.resolve(d.train_labels)
    classifier_path = cfg.resolve(d.classifier)

    def do_labels() -> None:
        if classifier_path is not None:
            scored = load_scored_labels(classifier_path)
        elif "train" in roles:
            # stand-in classifier: top-5 vote with the last embedding model alone
            tl = load_labels(train_labels_path)
            train_last = load_embeddings(cfg.resolve(d.train[-1]))
            scored = {}
            for role in ("index", "query"):
                votes = eng.knn_votes(load_embeddings(cfg.resolve(roles[role][-1])), train_last, tl)
                scored.update({i: (p.label, p.score) for i, p in votes.items()})
        else:
            scored = {}
        save_scored_labels(scored, P("labels.predicted.csv"))

    label_inputs = [p for p in (classifier_path,) if p] or (
        [train_labels_path, cfg.resolve(d.train[-1]), cfg.resolve(d.index[-1]), cfg.resolve(d.query[-1])] if d.train else []
    )
    run.stage("labels", label_inputs, {"vote_k": cfg.recognition.vote_k}, [P("labels.predicted.csv")], do_labels)

    if "train" in roles:

        def do_categories() -> None:
            tl = load_labels(train_labels_path)
            train = load_embeddings(P("pca.train.emb"))
            cats = {}
            for role in ("index", "query"):
                cats.update(eng.categories(load_embeddings(P(f"pca.{role}.emb")), train, tl))
            save_scored_labels({i: (lab, 1.0) for i, lab in cats.items()}, P("categories.csv"))

        run.stage(
            "categories",
            [train_labels_path, P("pca.train.emb"), P("pca.index.emb"), P("pca.query.emb")],
            {"thr": cfg.recognition.retrieval_threshold, "k": cfg.recognition.vote_k},
            [P("categories.csv")],
            do_categories,
        )

    def verifier_inputs_loaded() -> tuple[dict[str, str], dict[str, MatchResult] | None]:
        labels = {i: lab for i, (lab, _) in load_scored_labels(P("labels.predicted.csv")).items()}
        matches = None
        if has_local:
            matches = {**load_matches(P("matches.index.csv")), **load_matches(P("matches.query.csv"))}
        return labels, matches

    def current_verifier() -> Verifier:
        return eng.verifier(*verifier_inputs_loaded())

    verifier_inputs = [P("labels.predicted.csv")] + ([P("matches.index.csv"), P("matches.query.csv")] if has_local else [])
    rerank_params = {
        **cfg.rerank.__dict__,
        "min_matches": cfg.local.min_matches,
    }

    query_ids = load_embeddings(P("pca.query.emb")).ids

    run.stage(
        "search.baseline",
        [P("pca.query.emb"), P("pca.index.emb")],
        {"k": cfg.retrieval_k},
        [P("ranked.baseline.csv")],
        lambda: save_ranked(eng.search(load_embeddings(P("pca.query.emb")), load_embeddings(P("pca.index.emb"))), P("ranked.baseline.csv")),
    )
    run.stage(
        "dba",
        [P("pca.index.emb"), *verifier_inputs],
        rerank_params,
        [P("dba.index.emb")],
        lambda: save_embeddings(eng.dba(load_embeddings(P("pca.index.emb")), current_verifier()), P("dba.index.emb")),
    )
    run.stage(
        "qe",
        [P("pca.query.emb"), P("dba.index.emb"), *verifier_inputs],
        rerank_params,
        [P("qe.query.emb")],
        lambda: save_embeddings(
            eng.qe(load_embeddings(P("pca.query.emb")), load_embeddings(P("dba.index.emb")), current_verifier()),
            P("qe.query.emb"),
        ),
    )
    run.stage(
        "search.dba_qe",
        [P("qe.query.emb"), P("dba.index.emb")],
        {"k": cfg.retrieval_k},
        [P("ranked.dba_qe.csv")],
        lambda: save_ranked(eng.search(load_embeddings(P("qe.query.emb")), load_embeddings(P("dba.index.emb"))), P("ranked.dba_qe.csv")),
    )

    cat_inputs = [P("categories.csv")] if "train" in roles else []

    def do_rerank() -> None:
        cats = {i: lab for i, (lab, _) in load_scored_labels(P("categories.csv")).items()} if cat_inputs else None
        ranked = eng.rerank(load_ranked(P("ranked.dba_qe.csv"), query_ids), eng.final_verifier(*verifier_inputs_loaded()), cats)
        save_ranked(ranked, P("ranked.rerank.csv"))
        write_retrieval_submission({r.query: r.ids for r in ranked}, P("retrieval_submission.csv"), cfg.retrieval_k)

    run.stage(
        "rerank",
        [P("ranked.dba_qe.csv"), *verifier_inputs, *cat_inputs],
        rerank_params,
        [P("ranked.rerank.csv"), P("retrieval_submission.csv")],
        do_rerank,
    )

    if "train" in roles:
        det_path = cfg.resolve(d.detections)

        def do_recognize() -> None:
            res = eng.recognize(
                load_embeddings(P("pca.query.emb")),
                load_embeddings(P("pca.train.emb")),
                load_labels(train_labels_path),
                as_predictions(load_scored_labels(P("labels.predicted.csv"))),
                load_detections(det_path) if det_path else None,
            )
            for stage_name, preds in res.stages.items():
                save_predictions(preds, P(f"predictions.{stage_name}.csv"))
            write_report_csv(res.filter_report, ["id", "stage", "reason"], P("filter_report.csv"))
            by_id = {p.image: p for p in res.final}
            rows = {}
            for i in query_ids:
                p = by_id.get(i)
                if p is None or (p.filtered and cfg.recognition.drop_filtered):
                    rows[i] = None
                else:
                    rows[i] = (p.label, p.score)
            write_recognition_submission(rows, P("recognition_submission.csv"))

        stage_names = ("vote", "vote_filter", "grade_a", "grade_ab", "grade_ab_frequency")
        run.stage(
            "recognize",
            [P("pca.query.emb"), P("pca.train.emb"), train_labels_path, P("labels.predicted.csv"), *([det_path] if det_path else [])],
            {"recognition": cfg.recognition.__dict__, "filter": cfg.filter.__dict__},
            [P("recognition_submission.csv"), P("filter_report.csv"), *[P(f"predictions.{s}.csv") for s in stage_names]],
            do_recognize,
        )

    if d.truth_retrieval or (d.truth_recognition and "train" in roles):
        truth_inputs = [cfg.resolve(p) for p in (d.truth_retrieval, d.truth_recognition) if p]

        def do_evaluate() -> None:
            rows = []
            if d.truth_retrieval:
                rel = load_retrieval_truth(cfg.resolve(d.truth_retrieval))
                for name in ("baseline", "dba_qe", "rerank"):
                    ranked = load_ranked(P(f"ranked.{name}.csv"), query_ids)
                    rows.append(("retrieval", name, "mAP@100", f"{map_at_k({r.query: r for r in ranked}, rel, 100):.6f}"))
            if d.truth_recognition and "train" in roles:
                truth = GroundTruth(recognition=load_optional_labels(cfg.resolve(d.truth_recognition)))
                for name in ("vote", "vote_filter", "grade_a", "grade_ab", "grade_ab_frequency"):
                    preds = load_predictions(P(f"predictions.{name}.csv"))
                    if name != "vote" and cfg.recognition.drop_filtered:
                        preds = [p for p in preds if not p.filtered]
                    rows.append(("recognition", name, "GAP", f"{gap(preds, truth):.6f}"))
            header = ["task", "stage", "metric", "value"]
            write_report_csv(rows, header, P("metrics.csv"))
            P("metrics.txt").write_text(format_table(rows, header) + "\n")

        eval_inputs = truth_inputs + [P("ranked.baseline.csv"), P("ranked.dba_qe.csv"), P("ranked.rerank.csv")]
        if "train" in roles:
            eval_inputs.append(P("recognition_submission.csv"))
        run.stage("evaluate", eval_inputs, {"drop_filtered": cfg.recognition.drop_filtered}, [P("metrics.csv"), P("metrics.txt")], do_evaluate)

    return run
