"""Pipeline configuration: one JSON document, defaults mirror the published setup."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ValidationError
from .recognition import FilterParams, GradeParams, RecognitionParams
from .rerank import RerankParams


@dataclass
class DataPaths:
    index: list[str] = field(default_factory=list)
    query: list[str] = field(default_factory=list)
    train: list[str] = field(default_factory=list)
    train_labels: str | None = None
    index_local: str | None = None
    query_local: str | None = None
    detections: str | None = None
    classifier: str | None = None
    truth_recognition: str | None = None
    truth_retrieval: str | None = None


@dataclass
class PcaConfig:
    out_dim: int = 512
    whiten: bool = True
    renormalize_concat: bool = False


@dataclass
class IvfConfig:
    k: int = 512
    nprobe: int = 20
    max_iters: int = 25


@dataclass
class LocalConfig:
    sim_threshold: float = 0.85
    min_matches: int = 10


@dataclass
class RerankConfig:
    neighbor_depth: int = 300
    dba_base: int = 10
    dba_cap: int = 20
    qe_base: int = 3
    qe_cap: int = 6
    self_in_window: bool = True
    verifier: str = "or"
    use_classifier: bool = True
    use_local: bool = True
    category_promote: bool = True
    # verification used when reordering the final ranked lists: "local", "combined" or "none"
    final_verifier: str = "local"

    def params(self) -> RerankParams:
        return RerankParams(
            self.neighbor_depth, self.dba_base, self.dba_cap, self.qe_base, self.qe_cap, self.self_in_window
        )


@dataclass
class RecognitionConfig:
    vote_k: int = 5
    retrieval_threshold: float = 0.85
    a1_min_score: float = 0.9
    a2_max_score: float = 0.85
    frequent_min_count: int = 5
    frequency_mode: str = "stage_a1a2"
    drop_filtered: bool = False

    def params(self) -> RecognitionParams:
        return RecognitionParams(
            vote_k=self.vote_k,
            retrieval_threshold=self.retrieval_threshold,
            grades=GradeParams(self.a1_min_score, self.a2_max_score),
            frequent_min_count=self.frequent_min_count,
            frequency_mode=self.frequency_mode,
            drop_filtered=self.drop_filtered,
        )


@dataclass
class FilterConfig:
    det_score_threshold: float = 0.3
    area_ratio_threshold: float = 0.6
    sim_filter_threshold: float = 0.85
    sim_filter_topk: int = 3

    def params(self) -> FilterParams:
        return FilterParams(**dataclasses.asdict(self))


@dataclass
class PipelineConfig:
    data: DataPaths = field(default_factory=DataPaths)
    output_dir: str = "run"
    pca: PcaConfig = field(default_factory=PcaConfig)
    ivf: IvfConfig = field(default_factory=IvfConfig)
    local: LocalConfig = field(default_factory=LocalConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)
    recognition: RecognitionConfig = field(default_factory=RecognitionConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    retrieval_k: int = 100
    seed: int = 0
    workers: int = 1
    base_dir: str = "."

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base_dir: str | Path = ".") -> PipelineConfig:
        cfg = _build(cls, raw, "config")
        cfg.base_dir = str(base_dir)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: top level must be an object")
        return cls.from_dict(raw, path.parent)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)

    def validate(self, check_paths: bool = False) -> None:
        d = self.data
        if not d.index:
            raise ValidationError("config: data.index (gallery embedding paths) is required")
        if not d.query:
            raise ValidationError("config: data.query (query embedding paths) is required")
        for role in ("query", "train"):
            paths = getattr(d, role)
            if paths and len(paths) != len(d.index):
                raise ValidationError(f"config: data.{role} needs one path per model ({len(d.index)}), got {len(paths)}")
        if d.train and not d.train_labels:
            raise ValidationError("config: data.train requires data.train_labels")
        if (d.index_local is None) != (d.query_local is None):
            raise ValidationError("config: data.index_local and data.query_local go together")
        if self.pca.out_dim < 1:
            raise ValidationError("config: pca.out_dim must be positive")
        if self.ivf.k < 1 or self.ivf.nprobe < 1 or self.ivf.max_iters < 1:
            raise ValidationError("config: ivf.k, ivf.nprobe and ivf.max_iters must be positive")
        if self.ivf.nprobe > self.ivf.k:
            raise ValidationError("config: ivf.nprobe cannot exceed ivf.k")
        if not 0.0 <= self.local.sim_threshold <= 1.0:
            raise ValidationError("config: local.sim_threshold must be in [0,1]")
        if self.local.min_matches < 0:
            raise ValidationError("config: local.min_matches must be nonnegative")
        if self.rerank.verifier not in ("or", "and"):
            raise ValidationError("config: rerank.verifier must be 'or' or 'and'")
        if self.rerank.final_verifier not in ("local", "combined", "none"):
            raise ValidationError("config: rerank.final_verifier must be 'local', 'combined' or 'none'")
        self.rerank.params()
        self.filter.params()
        if self.recognition.frequency_mode not in ("stage_a1a2", "extended"):
            raise ValidationError("config: recognition.frequency_mode must be 'stage_a1a2' or 'extended'")
        for name in ("retrieval_threshold", "a1_min_score", "a2_max_score"):
            v = getattr(self.recognition, name)
            if not -1.0 <= v <= 1.0:
                raise ValidationError(f"config: recognition.{name} must be in [-1,1]")
        if self.recognition.vote_k < 1 or self.retrieval_k < 1:
            raise ValidationError("config: vote_k and retrieval_k must be positive")
        if self.workers < 1:
            raise ValidationError("config: workers must be positive")
        if check_paths:
            self.check_paths()

    def check_paths(self) -> None:
        d = self.data
        paths: list[str] = [*d.index, *d.query, *d.train]
        paths += [p for p in (d.train_labels, d.index_local, d.query_local, d.detections, d.classifier,
                              d.truth_recognition, d.truth_retrieval) if p]
        missing = [p for p in paths if not self.resolve(p).exists()]
        if missing:
            raise ValidationError(f"config: missing input file(s): {', '.join(missing)}")


def _build(cls: type, raw: Any, where: str) -> Any:
    if not isinstance(raw, dict):
        raise ValidationError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name != "base_dir"}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ValidationError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else fields[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = _coerce(value, default, f"{where}.{name}")
    return cls(**kwargs)


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"{where}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ValidationError(f"{where}: expected a list of paths")
        return value
    if value is not None and not isinstance(value, str):
        raise ValidationError(f"{where}: expected a string")
    return value
