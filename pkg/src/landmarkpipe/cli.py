"""Command-line entry point: one subcommand per pipeline step, plus ``pipeline`` and ``ablate``.

Exit codes: 0 success, 1 validation error (bad input, config or file format),
2 runtime error (including a failed pipeline stage).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .ablation import STAGES, ablation_run
from .config import PipelineConfig
from .errors import StageError, ValidationError
from .evaluation import GroundTruth, format_table, gap, load_retrieval_truth, map_at_k
from .features import concat_descriptors, load_pca, pca_apply_set, pca_fit, save_pca
from .localmatch import load_matches
from .pipeline import as_predictions, load_predictions, load_ranked, save_predictions, save_ranked
from .recognition import (
    ClassPartition,
    DetectorVerdict,
    FilterParams,
    GradeParams,
    RecognitionParams,
    detector_filter,
    frequency_rescore,
    frequent_set,
    grade_and_rescore,
    label_counts,
    similarity_filter,
    vote_top5,
)
from .rerank import RerankParams, combine_verifiers, label_verifier, local_verifier, run_dba, run_qe
from .search import ExactSearcher, IvfSearcher, ivf_build, kmeans_fit, load_ivf, save_ivf
from .store import (
    load_detections,
    load_embeddings,
    load_labels,
    load_local,
    load_optional_labels,
    load_retrieval_submission,
    load_scored_labels,
    save_embeddings,
    write_recognition_submission,
    write_retrieval_submission,
)
from .synth import SynthDataset, SynthSpec

log = logging.getLogger("landmarkpipe")


def _file_magic(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read(4)


def _verifier(args: argparse.Namespace):
    parts = []
    if args.labels:
        parts.append(label_verifier({i: lab for i, (lab, _) in load_scored_labels(args.labels).items()}))
    if args.matches:
        matches = {}
        for p in args.matches:
            matches.update(load_matches(p))
        parts.append(local_verifier(matches, args.min_matches))
    return combine_verifiers(parts, args.verifier)


def _rerank_params(args: argparse.Namespace) -> RerankParams:
    return RerankParams(args.depth, args.dba_base, args.dba_cap, args.qe_base, args.qe_cap, not args.self_outside_window)


# -- subcommands -----------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        n_labels=args.labels,
        images_per_label=args.per_label,
        distractors=args.distractors,
        dim=args.dim,
        noise=args.noise,
        seed=args.seed,
        n_models=args.models,
        queries_per_label=args.queries_per_label,
        query_distractors=args.query_distractors,
        train_per_label=args.train_per_label,
    )
    path = SynthDataset(spec).write(args.out)
    print(path)
    return 0


def cmd_concat(args: argparse.Namespace) -> int:
    out = concat_descriptors([load_embeddings(p) for p in args.inputs], args.renormalize)
    save_embeddings(out, args.out)
    log.info("wrote %d x %d to %s", len(out), out.dim, args.out)
    return 0


def cmd_pca_fit(args: argparse.Namespace) -> int:
    model = pca_fit(load_embeddings(args.gallery), args.dim, not args.no_whiten)
    save_pca(model, args.out)
    return 0


def cmd_pca_apply(args: argparse.Namespace) -> int:
    save_embeddings(pca_apply_set(load_pca(args.model), load_embeddings(args.input)), args.out)
    return 0


def cmd_ivf_build(args: argparse.Namespace) -> int:
    magic = _file_magic(args.input)
    if magic == b"LOC1":
        data = load_local(args.input)
        points = data.flatten()[2]
    else:
        data = load_embeddings(args.input)
        points = data.vectors
    cents = kmeans_fit(points, args.centers, args.iters, args.seed)
    save_ivf(ivf_build(data, cents), args.out)
    log.info("%d centers over %d points, inertia %.6g", cents.k, len(points), cents.inertia)
    return 0


def cmd_search(args: argparse.Namespace) -> int:
    queries = load_embeddings(args.queries)
    if args.index:
        searcher = IvfSearcher(load_ivf(args.index), args.nprobe)
    elif args.gallery:
        searcher = ExactSearcher(load_embeddings(args.gallery))
    else:
        raise ValidationError("search needs --gallery or --index")
    ranked = searcher.search_set(queries, args.k, exclude_self=args.exclude_self, workers=args.workers)
    save_ranked(ranked, args.out)
    if args.submission:
        write_retrieval_submission({r.query: r.ids for r in ranked}, args.submission, args.k)
    return 0


def cmd_dba(args: argparse.Namespace) -> int:
    gallery = load_embeddings(args.gallery)
    out = run_dba(gallery, ExactSearcher(gallery), _verifier(args), _rerank_params(args), args.workers)
    save_embeddings(out, args.out)
    return 0


def cmd_qe(args: argparse.Namespace) -> int:
    gallery = load_embeddings(args.gallery)
    out = run_qe(load_embeddings(args.queries), gallery, ExactSearcher(gallery), _verifier(args), _rerank_params(args), args.workers)
    save_embeddings(out, args.out)
    return 0


def cmd_recognize(args: argparse.Namespace) -> int:
    train_labels = load_labels(args.train_labels)
    ranked = ExactSearcher(load_embeddings(args.train)).search_set(load_embeddings(args.queries), args.k, exclude_self=False, workers=args.workers)
    preds = [vote_top5(r, train_labels, args.k) for r in ranked if len(r)]
    save_predictions(preds, args.out)
    if args.submission:
        write_recognition_submission({p.image: (p.label, p.score) for p in preds}, args.submission)
    return 0


def cmd_filter(args: argparse.Namespace) -> int:
    params = FilterParams(args.det_score, args.area_ratio, args.sim_threshold, args.topk)
    test = load_embeddings(args.queries)
    dets = load_detections(args.detections)
    verdicts = {i: detector_filter(dets.get(i, ()), ClassPartition(), params) for i in test.ids}
    seeds = [i for i in test.ids if verdicts[i] is DetectorVerdict.NON_LANDMARK_CANDIDATE]
    rows = [(i, "detector") for i in seeds]
    if len(seeds) >= params.sim_filter_topk:
        rest = [i for i in test.ids if verdicts[i] is DetectorVerdict.UNKNOWN]
        hit = similarity_filter(test.subset(rest), test.subset(seeds), params)
        rows += [(i, "similarity") for i in rest if i in hit]
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("id,stage\n")
        fh.writelines(f"{i},{stage}\n" for i, stage in rows)
    log.info("filtered %d of %d images", len(rows), len(test))
    return 0


def cmd_grade(args: argparse.Namespace) -> int:
    params = RecognitionParams(vote_k=args.k, grades=GradeParams(args.a1, args.a2))
    ranked = ExactSearcher(load_embeddings(args.train)).search_set(load_embeddings(args.queries), args.k, exclude_self=False, workers=args.workers)
    classifier = as_predictions(load_scored_labels(args.classifier)) if args.classifier else {}
    filtered: set[str] = set()
    if args.filtered:
        with open(args.filtered, encoding="utf-8") as fh:
            filtered = {line.split(",", 1)[0] for line in fh.read().splitlines()[1:] if line}
    preds = grade_and_rescore(ranked, load_labels(args.train_labels), classifier, filtered, params, use_b=bool(args.classifier), use_frequency=False)
    save_predictions(preds, args.out)
    return 0


def cmd_rescore(args: argparse.Namespace) -> int:
    preds = load_predictions(args.predictions)
    top = [p for p in preds if p.grade is not None and str(p.grade) == "A1B1"]
    out = frequency_rescore(preds, frequent_set(top, args.min_count), label_counts(top), args.mode)
    save_predictions(out, args.out)
    if args.submission:
        write_recognition_submission({p.image: (p.label, p.score) for p in out}, args.submission)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    rows = []
    if args.predictions:
        if not args.truth_recognition:
            raise ValidationError("--predictions needs --truth-recognition")
        truth = GroundTruth(recognition=load_optional_labels(args.truth_recognition))
        for p in args.predictions:
            rows.append((p, "GAP", f"{gap(load_predictions(p), truth):.6f}"))
    if args.ranked or args.submission:
        if not args.truth_retrieval:
            raise ValidationError("--ranked/--submission need --truth-retrieval")
        rel = load_retrieval_truth(args.truth_retrieval)
        for p in args.ranked or ():
            results = {r.query: r for r in load_ranked(p, _ranked_queries(p))}
            rows.append((p, f"mAP@{args.k}", f"{map_at_k(results, rel, args.k):.6f}"))
        for p in args.submission or ():
            rows.append((p, f"mAP@{args.k}", f"{map_at_k(load_retrieval_submission(p), rel, args.k):.6f}"))
    if not rows:
        raise ValidationError("evaluate needs --predictions, --ranked or --submission")
    print(format_table(rows, ["input", "metric", "value"]))
    return 0


def _ranked_queries(path: str) -> list[str]:
    seen: dict[str, None] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh.read().splitlines()[1:]:
            if line:
                seen.setdefault(line.split(",", 1)[0], None)
    return list(seen)


def cmd_pipeline(args: argparse.Namespace) -> int:
    from .pipeline import run_pipeline

    cfg = PipelineConfig.load(args.config)
    if args.workers is not None:
        cfg.workers = args.workers
    if args.output_dir:
        cfg.output_dir = str(Path(args.output_dir).resolve())
    cfg.validate(check_paths=True)
    run = run_pipeline(cfg, force=args.force)
    log.info("ran %d stage(s), skipped %d", len(run.executed), len(run.skipped))
    metrics = cfg.out / "metrics.txt"
    if metrics.exists():
        print(metrics.read_text(), end="")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = PipelineConfig.load(args.config)
    if args.workers is not None:
        cfg.workers = args.workers
    rows = ablation_run(cfg, args.stages, args.k)
    table = [(name, f"{value:.6f}") for name, value in rows]
    print(format_table(table, ["stage", f"mAP@{args.k}"]))
    if args.json:
        Path(args.json).write_text(json.dumps(dict(rows), indent=2) + "\n")
    return 0


# -- parser ----------------------------------------------------------------


def _add_verifier_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--labels", help="predicted labels CSV (id,label,score) for classifier agreement")
    p.add_argument("--matches", nargs="*", help="local match CSV(s) (query_id,candidate_id,match_count)")
    p.add_argument("--min-matches", type=int, default=10)
    p.add_argument("--verifier", choices=("or", "and"), default="or")
    p.add_argument("--depth", type=int, default=300, help="neighbors retrieved per image")
    p.add_argument("--dba-base", type=int, default=10)
    p.add_argument("--dba-cap", type=int, default=20)
    p.add_argument("--qe-base", type=int, default=3)
    p.add_argument("--qe-cap", type=int, default=6)
    p.add_argument("--self-outside-window", action="store_true", help="give the image an extra weight 1 instead of slot 0")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="landmarkpipe", description="Landmark retrieval and recognition pipeline")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", type=int, default=50)
    p.add_argument("--per-label", type=int, default=20)
    p.add_argument("--distractors", type=int, default=500)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--models", type=int, default=3)
    p.add_argument("--queries-per-label", type=int, default=5)
    p.add_argument("--query-distractors", type=int, default=250)
    p.add_argument("--train-per-label", type=int, default=10)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("concat", help="concatenate per-model embedding sets")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--renormalize", action="store_true")
    p.set_defaults(func=cmd_concat)

    p = sub.add_parser("pca-fit", help="fit PCA on the gallery set")
    p.add_argument("--gallery", required=True)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--no-whiten", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pca_fit)

    p = sub.add_parser("pca-apply", help="project and renormalize an embedding set")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pca_apply)

    p = sub.add_parser("ivf-build", help="build an IVF index over an EMB1 or LOC1 file")
    p.add_argument("--input", required=True)
    p.add_argument("--centers", type=int, default=512)
    p.add_argument("--iters", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ivf_build)

    p = sub.add_parser("search", help="k-nearest-neighbor search")
    p.add_argument("--queries", required=True)
    p.add_argument("--gallery")
    p.add_argument("--index", help="IVF1 index; searched instead of --gallery")
    p.add_argument("--nprobe", type=int, default=20)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--exclude-self", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="ranked CSV (query_id,rank,gallery_id,score)")
    p.add_argument("--submission", help="also write a retrieval submission CSV")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("dba", help="database-side augmentation")
    p.add_argument("--gallery", required=True)
    _add_verifier_args(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dba)

    p = sub.add_parser("qe", help="query expansion against a gallery")
    p.add_argument("--queries", required=True)
    p.add_argument("--gallery", required=True)
    _add_verifier_args(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_qe)

    p = sub.add_parser("recognize", help="top-k label vote against the labeled train set")
    p.add_argument("--queries", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--train-labels", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--submission")
    p.set_defaults(func=cmd_recognize)

    p = sub.add_parser("filter", help="detector and similarity non-landmark filter")
    p.add_argument("--queries", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--det-score", type=float, default=0.3)
    p.add_argument("--area-ratio", type=float, default=0.6)
    p.add_argument("--sim-threshold", type=float, default=0.85)
    p.add_argument("--topk", type=int, default=3)
    p.add_argument("--out", required=True, help="CSV of filtered ids (id,stage)")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("grade", help="assign grade bands and rescore vote predictions")
    p.add_argument("--queries", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--train-labels", required=True)
    p.add_argument("--classifier", help="classifier predictions CSV; enables B grades")
    p.add_argument("--filtered", help="output of the filter command")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--a1", type=float, default=0.9, help="A1 minimum score")
    p.add_argument("--a2", type=float, default=0.85, help="A2 maximum score")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grade)

    p = sub.add_parser("rescore", help="frequency boost for graded predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--mode", choices=("stage_a1a2", "extended"), default="stage_a1a2")
    p.add_argument("--out", required=True)
    p.add_argument("--submission")
    p.set_defaults(func=cmd_rescore)

    p = sub.add_parser("evaluate", help="GAP for predictions, mAP@k for ranked lists")
    p.add_argument("--predictions", nargs="*")
    p.add_argument("--truth-recognition")
    p.add_argument("--ranked", nargs="*")
    p.add_argument("--submission", nargs="*", help="retrieval submission CSV(s)")
    p.add_argument("--truth-retrieval")
    p.add_argument("--k", type=int, default=100)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="run the full resumable pipeline from a config")
    p.add_argument("config")
    p.add_argument("--force", action="store_true", help="rerun every stage")
    p.add_argument("--workers", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("ablate", help="cumulative retrieval ablation table")
    p.add_argument("config")
    p.add_argument("--stages", nargs="+", default=list(STAGES), choices=STAGES)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--workers", type=int)
    p.add_argument("--json")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
