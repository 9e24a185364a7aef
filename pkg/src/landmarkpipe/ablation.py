"""Cumulative retrieval ablation (single models, concat+PCA, +DBA/QE, +rerank)."""

from __future__ import annotations

from typing import Sequence

from .config import PipelineConfig
from .errors import ValidationError
from .evaluation import load_retrieval_truth, map_at_k
from .features import pca_apply_set
from .pipeline import Engine
from .store import load_embeddings, load_labels, load_local, load_scored_labels

STAGES = ("baseline", "single", "concat_pca", "dba_aqe", "rerank")


def ablation_run(cfg: PipelineConfig, stages: Sequence[str], k: int = 100) -> list[tuple[str, float]]:
    """Return ``(row name, mAP@k)`` rows for the requested stage flags, in pipeline order.

    ``baseline`` is the first embedding model alone; ``single`` adds one row per
    model. Later stages build on the earlier ones whether or not those are
    reported.
    """
    stages = list(stages)
    if not stages:
        raise ValidationError("ablation needs at least one stage")
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValidationError(f"unknown ablation stage(s) {unknown}; choose from {list(STAGES)}")
    if not cfg.data.truth_retrieval:
        raise ValidationError("ablation needs data.truth_retrieval")
    cfg.validate(check_paths=True)
    d = cfg.data
    eng = Engine(cfg)
    truth = load_retrieval_truth(cfg.resolve(d.truth_retrieval))
    index_sets = [load_embeddings(cfg.resolve(p)) for p in d.index]
    query_sets = [load_embeddings(cfg.resolve(p)) for p in d.query]

    def score(queries, gallery) -> float:
        return map_at_k({r.query: r for r in eng.search(queries, gallery, k)}, truth, k)

    rows: list[tuple[str, float]] = []
    if "single" in stages:
        rows += [(f"model{m}", score(q, g)) for m, (q, g) in enumerate(zip(query_sets, index_sets))]
    elif "baseline" in stages:
        rows.append(("model0", score(query_sets[0], index_sets[0])))
    if not any(s in stages for s in ("concat_pca", "dba_aqe", "rerank")):
        return rows

    index_cat, query_cat = eng.concat(index_sets), eng.concat(query_sets)
    pca = eng.fit_pca(index_cat)
    index_p, query_p = pca_apply_set(pca, index_cat), pca_apply_set(pca, query_cat)
    if "concat_pca" in stages:
        rows.append(("concat_pca", score(query_p, index_p)))
    if not any(s in stages for s in ("dba_aqe", "rerank")):
        return rows

    labels = {i: lab for i, (lab, _) in load_scored_labels(cfg.resolve(d.classifier)).items()} if d.classifier else None
    matches = None
    if d.index_local:
        iloc, qloc = load_local(cfg.resolve(d.index_local)), load_local(cfg.resolve(d.query_local))
        ivf = eng.build_local_index(iloc)
        matches = {**eng.match(iloc, ivf, True), **eng.match(qloc, ivf, False)}
    verifier = eng.verifier(labels, matches)
    index_dba = eng.dba(index_p, verifier)
    query_qe = eng.qe(query_p, index_dba, verifier)
    ranked = eng.search(query_qe, index_dba, k)
    if "dba_aqe" in stages:
        rows.append(("concat_pca_dba_aqe", map_at_k({r.query: r for r in ranked}, truth, k)))
    if "rerank" in stages:
        cats = None
        if d.train:
            tl = load_labels(cfg.resolve(d.train_labels))
            train_cat = eng.concat([load_embeddings(cfg.resolve(p)) for p in d.train])
            train_p = pca_apply_set(pca, train_cat)
            cats = {**eng.categories(index_p, train_p, tl), **eng.categories(query_p, train_p, tl)}
        reranked = eng.rerank(ranked, eng.final_verifier(labels, matches), cats)
        rows.append(("concat_pca_dba_aqe_rerank", map_at_k({r.query: r for r in reranked}, truth, k)))
    return rows
