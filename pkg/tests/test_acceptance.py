"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the summary lines inline;
they are also printed when output is captured.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import unit_rows
from oracles import GRADE_ORDER, grade_a_reference, grade_rank, knn_sort, mean_ap, micro_ap, vote_reference
from landmarkpipe.ablation import ablation_run
from landmarkpipe.config import PipelineConfig
from landmarkpipe.evaluation import GroundTruth, gap, map_at_k
from landmarkpipe.features import load_pca, pca_fit, pca_project, save_pca
from landmarkpipe.pipeline import load_predictions, run_pipeline
from landmarkpipe.recognition import Prediction, RecognitionParams, grade_and_rescore
from landmarkpipe.rerank import dba_weights, qe_weights
from landmarkpipe.search import ExactSearcher, RankedList, ivf_build, ivf_search, kmeans_fit, knn_exact, load_ivf, save_ivf
from landmarkpipe.store import EmbeddingSet, load_embeddings, load_optional_labels, save_embeddings
from landmarkpipe.synth import SynthDataset, SynthSpec


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nacceptance {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return emit


@pytest.fixture(scope="module")
def default_bench(tmp_path_factory):
    """The seeded default benchmark: 50 labels x 20 images + 500 distractors, noise 0.15."""
    root = tmp_path_factory.mktemp("bench")
    spec = SynthSpec(n_labels=50, images_per_label=20, distractors=500, noise=0.15, seed=0)
    return SynthDataset(spec).write(root / "data")


# -- 1 -----------------------------------------------------------------------

# window length N per verified count M, written out in full for M = 0..50
DBA_N = [10] * 11 + list(range(11, 21)) + [20] * 30
QE_N = [3] * 4 + [4, 5, 6] + [6] * 44
SPOT = {"dba": {5: 10, 15: 15, 30: 20}, "qe": {2: 3, 10: 6}}


def test_1_weight_schedules(report):
    t0 = time.perf_counter()
    bad = []
    for name, fn, table in (("dba", dba_weights, DBA_N), ("qe", qe_weights, QE_N)):
        for m in range(51):
            n = table[m]
            want = [float(Fraction(n - x, n)) for x in range(n)]
            got = fn(m).tolist()
            if got != want:
                bad.append((name, m))
        bad += [(name, m) for m, n in SPOT[name].items() if len(fn(m)) != n]
    elapsed = time.perf_counter() - t0
    report(1, not bad and elapsed < 1.0, f"M=0..50 exact for dba and qe, {len(bad)} mismatches, {elapsed:.3f}s (< 1s)")


# -- 2 -----------------------------------------------------------------------


def _instance(r):
    n, d = int(r.integers(1, 1001)), int(r.integers(1, 65))
    if r.random() < 0.25:
        vec = r.integers(-1, 2, (n, d)).astype(np.float32)  # many exact ties
    else:
        vec = r.standard_normal((n, d)).astype(np.float32)
    ids = [f"g{i:04d}" for i in r.permutation(n)]
    return EmbeddingSet(ids, vec)


def test_2_search_oracle_equivalence(report):
    r = np.random.default_rng(2)
    t0 = time.perf_counter()
    mismatches = ivf_mismatches = 0
    for _ in range(200):
        g = _instance(r)
        k = int(r.integers(1, 30))
        queries = r.standard_normal((2, g.dim)).astype(np.float32)
        lookup = dict(g.items())
        exclude = g.ids[0] if r.random() < 0.3 else None
        nc = int(r.integers(1, min(len(g), 16) + 1))
        index = ivf_build(g, kmeans_fit(g.vectors, nc, 5, int(r.integers(1000))))
        for q in queries:
            got = knn_exact(q, g, k, exclude)
            want = [i for i, _ in knn_sort(q, lookup, k, exclude)]
            mismatches += got.ids != want
            full = ivf_search(index, q, nc, k, exclude)
            ivf_mismatches += full.ids != got.ids or full.scores.tobytes() != got.scores.tobytes()
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and ivf_mismatches == 0 and elapsed < 30
    report(2, ok, f"400 queries over 200 instances: {mismatches} oracle and {ivf_mismatches} all-probe mismatches, {elapsed:.1f}s (< 30s)")


# -- 3 -----------------------------------------------------------------------


def test_3_ivf_recall(report):
    r = np.random.default_rng(3)
    d, n, n_clusters = 64, 10_000, 200
    centers = unit_rows(r, n_clusters, d)
    owner = r.integers(n_clusters, size=n)
    x = centers[owner] + r.standard_normal((n, d)) / np.sqrt(d)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    g = EmbeddingSet([f"v{i:05d}" for i in range(n)], x.astype(np.float32))
    q_owner = r.integers(n_clusters, size=200)
    q = centers[q_owner] + r.standard_normal((200, d)) / np.sqrt(d)

    t0 = time.perf_counter()
    index = ivf_build(g, kmeans_fit(g.vectors, 512, 25, 0))
    exact = ExactSearcher(g)
    hits = 0
    for v in q:
        truth = set(exact.search(v, 10).ids)
        hits += len(truth & set(ivf_search(index, v, 20, 10).ids))
    elapsed = time.perf_counter() - t0
    recall = hits / (10 * len(q))
    report(3, recall >= 0.95 and elapsed < 60, f"recall@10 {recall:.4f} (>= 0.95) with 512 centers, nprobe 20, {elapsed:.1f}s (< 60s)")


# -- 4 -----------------------------------------------------------------------


def _recognition_instance(r):
    n_img, n_lab = int(r.integers(1, 51)), int(r.integers(1, 11))
    truth = {f"i{i:02d}": (str(r.integers(n_lab)) if r.random() < 0.7 else None) for i in range(n_img)}
    if all(v is None for v in truth.values()):
        truth["i00"] = "0"
    preds = []
    for i in truth:
        if r.random() < 0.85:
            s = float(np.round(r.random(), 1)) if r.random() < 0.3 else float(r.random())
            preds.append((i, str(r.integers(n_lab)), s))
    return preds, truth


def _monotone(r):
    a, b, c = r.uniform(0.1, 5), r.uniform(-3, 3), r.uniform(0, 2)
    kind = int(r.integers(4))
    if kind == 0:
        return lambda s: a * s + b
    if kind == 1:
        return lambda s: np.exp(a * s) + b
    if kind == 2:
        return lambda s: a * s + c * s**3 + b
    return lambda s: np.arctan(a * s) + b


def test_4_metric_oracles(report):
    r = np.random.default_rng(4)
    worst_gap = worst_map = 0.0
    for _ in range(200):
        preds, truth = _recognition_instance(r)
        worst_gap = max(worst_gap, abs(gap(preds, truth) - micro_ap(preds, truth)))

        n_q, n_g, k = int(r.integers(1, 11)), int(r.integers(1, 51)), int(r.integers(1, 101))
        gallery = [f"g{i}" for i in range(n_g)]
        rel = {f"q{q}": set(r.choice(gallery, int(r.integers(1, n_g + 1)), replace=False)) for q in range(n_q)}
        results = {q: list(r.permutation(gallery)[: int(r.integers(0, n_g + 1))]) for q in rel if r.random() < 0.9}
        worst_map = max(worst_map, abs(map_at_k(results, rel, k) - mean_ap(results, rel, k)))

    moved_ok = 0
    for _ in range(10):
        f = _monotone(r)
        preds, truth = _recognition_instance(r)
        moved_ok += gap([(i, lab, f(s)) for i, lab, s in preds], truth) == gap(preds, truth)
    ok = worst_gap <= 1e-12 and worst_map <= 1e-12 and moved_ok == 10
    report(4, ok, f"max |gap - oracle| {worst_gap:.1e}, max |mAP - oracle| {worst_map:.1e} (<= 1e-12), {moved_ok}/10 transforms invariant")


# -- 5 -----------------------------------------------------------------------


def test_5_synthetic_ablation(report, default_bench):
    t0 = time.perf_counter()
    rows = dict(ablation_run(PipelineConfig.load(default_bench), ["single", "concat_pca", "dba_aqe", "rerank"]))
    elapsed = time.perf_counter() - t0
    base, dq, full = rows["concat_pca"], rows["concat_pca_dba_aqe"], rows["concat_pca_dba_aqe_rerank"]
    singles = [rows[f"model{m}"] for m in range(3)]
    ok = base < dq and base < full and dq - base >= 0.02 and max(singles) < dq and elapsed < 300
    table = ", ".join(f"{k} {v:.4f}" for k, v in rows.items())
    report(5, ok, f"mAP@100: {table}; +DBA+QE gain {dq - base:.4f} (>= 0.02), {elapsed:.1f}s (< 300s)")


# -- 6 -----------------------------------------------------------------------


def _prediction_set(r):
    labels = "abcdefg"
    n_img = int(r.integers(1, 30))
    ranked, train_labels, classifier, filtered, refs = [], {}, {}, set(), {}
    for i in range(n_img):
        q = f"q{i:02d}"
        n_hits = int(r.integers(1, 6))
        pool = labels[: int(r.integers(1, 8))]
        labs = [pool[int(r.integers(len(pool)))] for _ in range(n_hits)]
        if r.random() < 0.3:
            scores = sorted(r.choice([0.8, 0.86, 0.9, 0.95], n_hits), reverse=True)
        else:
            scores = sorted(r.uniform(0.5, 1.0, n_hits), reverse=True)
        ids = [f"{q}_h{j}" for j in range(n_hits)]
        train_labels.update(zip(ids, labs))
        ranked.append(RankedList(q, ids, np.array(scores)))
        if r.random() < 0.8:
            classifier[q] = Prediction(q, labels[int(r.integers(len(labels)))], float(r.random()))
        if r.random() < 0.1:
            filtered.add(q)
        refs[q] = list(zip(labs, [float(s) for s in scores]))
    return ranked, train_labels, classifier, filtered, refs


def test_6_grades_rescore_and_filter(report, default_bench):
    r = np.random.default_rng(6)
    params = RecognitionParams()
    grade_errors = order_errors = 0
    for _ in range(1000):
        ranked, train_labels, classifier, filtered, refs = _prediction_set(r)
        preds = grade_and_rescore(ranked, train_labels, classifier, filtered, params, use_frequency=False)
        for p in preds:
            if p.image in filtered:
                grade_errors += not p.filtered
                continue
            label, _ = vote_reference(refs[p.image])
            clf = classifier.get(p.image)
            want = grade_a_reference(refs[p.image]) + ("B1" if clf is not None and clf.label == label else "B2")
            grade_errors += str(p.grade) != want or p.label != label
        # pooled order: nonincreasing grade, filtered last
        pooled = sorted(preds, key=lambda p: -p.score)
        ranks = [len(GRADE_ORDER) if p.filtered else grade_rank(str(p.grade)) for p in pooled]
        order_errors += any(a > b for a, b in zip(ranks, ranks[1:]))

    cfg = PipelineConfig.load(default_bench)
    run_pipeline(cfg)
    truth = GroundTruth(recognition=load_optional_labels(cfg.resolve(cfg.data.truth_recognition)))
    before = gap(load_predictions(cfg.out / "predictions.vote.csv"), truth)
    after = gap(load_predictions(cfg.out / "predictions.vote_filter.csv"), truth)
    n_filtered = sum(p.filtered for p in load_predictions(cfg.out / "predictions.vote_filter.csv"))
    ok = grade_errors == 0 and order_errors == 0 and after > before
    report(
        6,
        ok,
        f"1000 sets: {grade_errors} grade and {order_errors} order errors; "
        f"GAP {before:.4f} -> {after:.4f} with {n_filtered} images filtered",
    )


# -- 7 -----------------------------------------------------------------------


def test_7_pca_properties(report):
    r = np.random.default_rng(7)
    d = 32
    mix = r.standard_normal((d, d)) * np.linspace(3, 0.2, d)
    x = r.standard_normal((400, d)) @ mix.T + 5
    emb = EmbeddingSet([f"p{i:03d}" for i in range(400)], x.astype(np.float32))
    xf = emb.vectors.astype(np.float64)

    part = pca_fit(emb, 12, whiten=True)
    ortho = np.abs(part.basis.T @ part.basis - np.eye(12)).max()
    w = pca_project(part, xf)
    cov = (w - w.mean(axis=0)).T @ (w - w.mean(axis=0)) / len(w)
    white = np.abs(cov - np.eye(12)).max()

    full = pca_fit(emb, d, whiten=False)
    p = pca_project(full, xf)
    i, j = r.integers(400, size=(2, 500))
    dist = np.abs(np.linalg.norm(p[i] - p[j], axis=1) - np.linalg.norm(xf[i] - xf[j], axis=1)).max()
    ok = ortho <= 1e-5 and white <= 1e-3 and dist <= 1e-5
    report(7, ok, f"orthonormality {ortho:.1e} (<= 1e-5), whitened cov {white:.1e} (<= 1e-3), distance {dist:.1e} (<= 1e-5)")


# -- 8 -----------------------------------------------------------------------

SUBMISSIONS = ("retrieval_submission.csv", "recognition_submission.csv")


def test_8_determinism_and_formats(report, tmp_path):
    spec = SynthSpec(n_labels=10, images_per_label=8, distractors=40, queries_per_label=3, query_distractors=15, train_per_label=4)
    cfg_path = SynthDataset(spec).write(tmp_path / "data")
    outs = {}
    for name, workers in (("a", 1), ("b", 1), ("w8", 8)):
        cfg = PipelineConfig.load(cfg_path)
        cfg.workers = workers
        cfg.output_dir = str(tmp_path / name)
        run_pipeline(cfg)
        outs[name] = [(tmp_path / name / f).read_bytes() for f in SUBMISSIONS]
    runs_equal = outs["a"] == outs["b"]
    workers_equal = outs["a"] == outs["w8"]

    roundtrips = []
    out = tmp_path / "a"
    for src, load, save in (
        (out / "pca.index.emb", load_embeddings, save_embeddings),
        (out / "local.ivf1", load_ivf, save_ivf),
        (out / "pca.pca1", load_pca, save_pca),
    ):
        copy = tmp_path / f"copy{src.suffix}"
        save(load(src), copy)
        roundtrips.append(copy.read_bytes() == src.read_bytes())
    ok = runs_equal and workers_equal and all(roundtrips)
    report(
        8,
        ok,
        f"two runs identical: {runs_equal}; 1 vs 8 workers identical: {workers_equal}; "
        f"EMB1/IVF1/PCA1 byte roundtrip: {roundtrips}",
    )
