"""Landmark retrieval and recognition: descriptor stores, PCA, exact and IVF search,
local-feature verification, DBA/QE reranking, graded recognition and metrics."""

from .errors import FormatError, StageError, ValidationError
from .evaluation import GroundTruth, gap, map_at_k
from .features import PcaModel, concat_descriptors, l2_normalize, pca_apply, pca_fit
from .localmatch import MatchResult, match_images, verify_pair
from .recognition import (
    Grade,
    GradeA,
    GradeB,
    Prediction,
    detector_filter,
    frequency_rescore,
    frequent_set,
    grade_a,
    grade_b,
    rescore,
    retrieval_recognize,
    similarity_filter,
    vote_top5,
)
from .rerank import (
    RerankParams,
    aggregate,
    category_promote,
    dba_weights,
    qe_weights,
    run_dba,
    run_qe,
    verify_neighbors,
)
from .search import Centroids, IvfIndex, RankedList, ivf_build, ivf_search, kmeans_fit, knn_exact
from .store import EmbeddingSet, LocalDescriptorSet, load_embeddings, save_embeddings

__version__ = "0.1.0"
