"""Seeded synthetic landmark benchmark.

Every landmark label owns a latent center; an image of that label is the
center plus image-level appearance noise, and each embedding "model" sees the
image through its own random rotation plus model-level noise. Non-landmark
images are drawn around a handful of theme centers (food, people, ...) with a
wider spread. Local descriptors are noisy copies of per-label prototype
points; detections and a noisy classifier are simulated per role.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .evaluation import save_retrieval_truth
from .features import l2_normalize_rows
from .recognition import LANDMARK_CLASSES, UNCERTAIN_CLASSES
from .store import (
    Detection,
    EmbeddingSet,
    LocalDescriptorSet,
    save_detections,
    save_embeddings,
    save_labels,
    save_local,
    save_scored_labels,
)

NON_LANDMARK_CLASSES = ("Person", "Car", "Food", "Dog", "Furniture", "Cat", "Plant", "Clothing")


@dataclass
class SynthSpec:
    n_labels: int = 50
    images_per_label: int = 20
    distractors: int = 500
    dim: int = 64
    noise: float = 0.15
    seed: int = 0
    n_models: int = 3
    queries_per_label: int = 5
    query_distractors: int = 250
    train_per_label: int = 10
    n_themes: int = 10
    theme_spread: float = 1.5
    local_dim: int = 32
    points_per_image: int = 24
    prototypes_per_label: int = 48
    local_noise: float = 0.02
    classifier_accuracy: float = 0.8

    def __post_init__(self) -> None:
        for name in ("n_labels", "images_per_label", "dim", "n_models", "local_dim", "points_per_image", "prototypes_per_label"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        for name in ("distractors", "queries_per_label", "query_distractors", "train_per_label", "n_themes"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if self.noise < 0:
            raise ValidationError("noise must be nonnegative")


@dataclass
class _Role:
    ids: list[str]
    labels: list[str | None]
    latent: np.ndarray


def _unit(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return l2_normalize_rows(rng.standard_normal((n, d)))


class SynthDataset:
    """In-memory synthetic benchmark. ``write`` persists it with a ready-to-run config."""

    ROLES = ("index", "query", "train")

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        s = spec
        centers = _unit(rng, s.n_labels, s.dim)
        themes = _unit(rng, max(s.n_themes, 1), s.dim)
        sigma = s.noise  # per-coordinate std, centers are unit-norm

        def landmark_block(prefix: str, per_label: int) -> _Role:
            ids, labels, lat = [], [], []
            for lab in range(s.n_labels):
                for j in range(per_label):
                    ids.append(f"{prefix}_l{lab:03d}_{j:03d}")
                    labels.append(str(lab))
                    lat.append(centers[lab] + sigma * rng.standard_normal(s.dim))
            return _Role(ids, labels, np.array(lat).reshape(-1, s.dim))

        def distractor_block(prefix: str, count: int) -> _Role:
            ids = [f"{prefix}_d{j:04d}" for j in range(count)]
            t = rng.integers(len(themes), size=count)
            lat = themes[t] + s.theme_spread * sigma * rng.standard_normal((count, s.dim))
            return _Role(ids, [None] * count, lat.reshape(-1, s.dim))

        def join(a: _Role, b: _Role) -> _Role:
            return _Role(a.ids + b.ids, a.labels + b.labels, np.concatenate([a.latent, b.latent]))

        self.roles = {
            "index": join(landmark_block("idx", s.images_per_label), distractor_block("idx", s.distractors)),
            "query": join(landmark_block("q", s.queries_per_label), distractor_block("q", s.query_distractors)),
            "train": landmark_block("tr", s.train_per_label),
        }

        rotations = [np.linalg.qr(rng.standard_normal((s.dim, s.dim)))[0] for _ in range(s.n_models)]
        self.embeddings: dict[str, list[EmbeddingSet]] = {}
        for role in self.ROLES:
            r = self.roles[role]
            sets = []
            for rot in rotations:
                v = r.latent @ rot + sigma * rng.standard_normal(r.latent.shape)
                sets.append(EmbeddingSet(r.ids, l2_normalize_rows(v).astype(np.float32), s.dim))
            self.embeddings[role] = sets

        protos = [_unit(rng, s.prototypes_per_label, s.local_dim) for _ in range(s.n_labels)]
        lsigma = s.local_noise
        self.local: dict[str, LocalDescriptorSet] = {}
        for role in ("index", "query"):
            r = self.roles[role]
            pts = []
            for lab in r.labels:
                if lab is None:
                    p = rng.standard_normal((s.points_per_image, s.local_dim))
                else:
                    pick = rng.choice(s.prototypes_per_label, size=min(s.points_per_image, s.prototypes_per_label), replace=False)
                    p = protos[int(lab)][pick] + lsigma * rng.standard_normal((len(pick), s.local_dim))
                pts.append(l2_normalize_rows(p).astype(np.float32))
            self.local[role] = LocalDescriptorSet(r.ids, pts, s.local_dim)

        self.detections = {role: self._detections(rng, self.roles[role]) for role in ("index", "query")}

        label_names = [str(lab) for lab in range(s.n_labels)]
        self.classifier: dict[str, tuple[str, float]] = {}
        for role in ("index", "query"):
            r = self.roles[role]
            for image_id, lab in zip(r.ids, r.labels):
                if lab is not None and rng.random() < s.classifier_accuracy:
                    self.classifier[image_id] = (lab, float(rng.uniform(0.5, 1.0)))
                else:
                    self.classifier[image_id] = (label_names[int(rng.integers(s.n_labels))], float(rng.uniform(0.0, 0.6)))

    @staticmethod
    def _detections(rng: np.random.Generator, role: _Role) -> dict[str, list[Detection]]:
        landmark = sorted(LANDMARK_CLASSES)
        uncertain = sorted(UNCERTAIN_CLASSES)

        def box(min_side: float, max_side: float) -> tuple[float, float, float, float]:
            w, h = rng.uniform(min_side, max_side, size=2)
            x0, y0 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
            return (float(x0), float(y0), min(1.0, float(x0 + w)), min(1.0, float(y0 + h)))

        out: dict[str, list[Detection]] = {}
        for image_id, lab in zip(role.ids, role.labels):
            objs = []
            u = rng.random()
            if lab is not None:
                if u < 0.85:
                    objs.append(Detection(landmark[int(rng.integers(len(landmark)))], float(rng.uniform(0.4, 1.0)), box(0.5, 1.0)))
                if rng.random() < 0.3:
                    objs.append(Detection(NON_LANDMARK_CLASSES[int(rng.integers(len(NON_LANDMARK_CLASSES)))], float(rng.uniform(0.3, 1.0)), box(0.1, 0.5)))
            else:
                if u < 0.6:
                    objs.append(Detection(NON_LANDMARK_CLASSES[int(rng.integers(len(NON_LANDMARK_CLASSES)))], float(rng.uniform(0.35, 1.0)), box(0.8, 1.0)))
                elif u < 0.8:
                    objs.append(Detection(uncertain[int(rng.integers(len(uncertain)))], float(rng.uniform(0.3, 1.0)), box(0.5, 1.0)))
                elif u < 0.9:
                    objs.append(Detection(NON_LANDMARK_CLASSES[int(rng.integers(len(NON_LANDMARK_CLASSES)))], float(rng.uniform(0.05, 0.3)), box(0.8, 1.0)))
            out[image_id] = objs
        return out

    def labels(self, role: str) -> dict[str, str | None]:
        r = self.roles[role]
        return dict(zip(r.ids, r.labels))

    def retrieval_truth(self) -> dict[str, set[str]]:
        by_label: dict[str, set[str]] = {}
        for image_id, lab in zip(self.roles["index"].ids, self.roles["index"].labels):
            if lab is not None:
                by_label.setdefault(lab, set()).add(image_id)
        return {q: set(by_label.get(lab, ())) for q, lab in self.labels("query").items() if lab is not None}

    def write(self, out_dir: str | Path) -> Path:
        """Write every dataset file plus ``config.json``; returns the config path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for role in self.ROLES:
            for m, emb in enumerate(self.embeddings[role]):
                save_embeddings(emb, out / f"{role}.m{m}.emb")
        for role in ("index", "query"):
            save_local(self.local[role], out / f"{role}.loc")
            save_detections(self.detections[role], out / f"{role}.dets.jsonl")
        save_labels({k: v for k, v in self.labels("train").items()}, out / "train_labels.csv")
        save_scored_labels(self.classifier, out / "classifier.csv")
        save_labels(self.labels("query"), out / "truth_recognition.csv")
        save_retrieval_truth(self.retrieval_truth(), out / "truth_retrieval.csv")
        config = synth_config(self.spec)
        path = out / "config.json"
        path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
        (out / "synth_spec.json").write_text(json.dumps(asdict(self.spec), indent=2, sort_keys=True) + "\n")
        return path


def synth_config(spec: SynthSpec) -> dict:
    """Pipeline config matched to the synthetic data's scale (paths relative to the data dir)."""
    m = range(spec.n_models)
    n_index = spec.n_labels * spec.images_per_label + spec.distractors
    return {
        "data": {
            "index": [f"index.m{i}.emb" for i in m],
            "query": [f"query.m{i}.emb" for i in m],
            "train": [f"train.m{i}.emb" for i in m],
            "train_labels": "train_labels.csv",
            "index_local": "index.loc",
            "query_local": "query.loc",
            "detections": "query.dets.jsonl",
            "classifier": "classifier.csv",
            "truth_recognition": "truth_recognition.csv",
            "truth_retrieval": "truth_retrieval.csv",
        },
        "output_dir": "run",
        "pca": {"out_dim": min(48, spec.dim * spec.n_models, n_index - 1), "whiten": False},
        "ivf": {"k": min(64, max(1, spec.n_labels * spec.points_per_image)), "nprobe": 8, "max_iters": 20},
        "local": {"sim_threshold": 0.85, "min_matches": 2},
        "rerank": {"neighbor_depth": min(300, n_index - 1) if n_index > 20 else 20},
        # synthetic cosine similarities sit lower than real ones, so the
        # score thresholds are set from the observed train-neighbor distributions
        "recognition": {"retrieval_threshold": 0.5, "a1_min_score": 0.55, "a2_max_score": 0.45},
        "filter": {"sim_filter_threshold": 0.37},
        "seed": spec.seed,
        "workers": 1,
    }
