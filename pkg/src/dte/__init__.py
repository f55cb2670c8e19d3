"""Deep tree-ensemble cascades with tree-embeddings and output-space features."""
from .cascade import CascadeConfig, CascadeModel, StoppingRule, Variant, fit_cascade, predict_cascade
from .dataset import Dataset, FeatureMatrix, TargetMatrix, TaskKind, load_csv
from .embeddings import EmbeddingConfig, fit_embedding_extractor
from .metrics import evaluate
from .persist import load, save

__version__ = "0.1.0"

__all__ = [
    "CascadeConfig",
    "CascadeModel",
    "Dataset",
    "EmbeddingConfig",
    "FeatureMatrix",
    "StoppingRule",
    "TargetMatrix",
    "TaskKind",
    "Variant",
    "evaluate",
    "fit_cascade",
    "fit_embedding_extractor",
    "load",
    "load_csv",
    "predict_cascade",
    "save",
]
