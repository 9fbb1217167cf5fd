"""fieldrank: a multi-field neural ranking engine.

Per-field text encoders over character tri-gram hashing, field-level masking
and dropout, per-field query representations, a Hadamard matching network,
pairwise training, NDCG evaluation, BM25/BM25F baselines, and a synthetic
corpus generator for desk-scale experiments.
"""

from .autodiff import SparseVector, Tape, Tensor, grad_check
from .corpus import Corpus, Document, JudgedQuery, SyntheticConfig, generate_synthetic
from .errors import ConfigError, DataError
from .evaluation import MetricReport, evaluate_run, ndcg_at_k, paired_t_test
from .model import FieldConfig, ModelConfig, ParameterStore, QueryTowerConfig, Ranker
from .training import LossConfig, TrainSchedule, TrainingTriple, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Corpus", "DataError", "Document", "FieldConfig", "JudgedQuery",
    "LossConfig", "MetricReport", "ModelConfig", "ParameterStore", "QueryTowerConfig",
    "Ranker", "SparseVector", "SyntheticConfig", "Tape", "Tensor", "TrainSchedule",
    "TrainingTriple", "evaluate_run", "generate_synthetic", "grad_check", "ndcg_at_k",
    "paired_t_test", "train",
]
