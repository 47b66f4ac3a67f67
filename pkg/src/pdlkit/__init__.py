"""Discover and label patterns of daily living in ambient smart-home sensor streams."""

from .corpus import (
    SensorEvent,
    Vocabulary,
    Window,
    WindowSet,
    SplitPlan,
    build_vocabulary,
    make_windows,
    parse_event_log,
    sample_windows,
    split_by_days,
)
from .encoder import EncoderConfig, MaskedSequenceEncoder, embed_all, train_mlm
from .neighbors import NeighborGraph, build_knn, cosine_similarity
from .scan import ScanClusterer, ScanConfig, fine_tune_scan
from .evaluation import (
    LabelHierarchy,
    LloydKMeans,
    bootstrap_ci,
    cohens_kappa,
    f1_scores,
    fleiss_kappa,
    majority_vote_mapping,
)

__version__ = "0.1.0"

__all__ = [
    "SensorEvent",
    "Vocabulary",
    "Window",
    "WindowSet",
    "SplitPlan",
    "build_vocabulary",
    "make_windows",
    "parse_event_log",
    "sample_windows",
    "split_by_days",
    "EncoderConfig",
    "MaskedSequenceEncoder",
    "embed_all",
    "train_mlm",
    "NeighborGraph",
    "build_knn",
    "cosine_similarity",
    "ScanClusterer",
    "ScanConfig",
    "fine_tune_scan",
    "LabelHierarchy",
    "LloydKMeans",
    "bootstrap_ci",
    "cohens_kappa",
    "f1_scores",
    "fleiss_kappa",
    "majority_vote_mapping",
    "__version__",
]
