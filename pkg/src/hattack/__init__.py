"""Hierarchical tactic-then-technique annotation of CTI text.

Retrieval narrows a query to a handful of tactics, scores only their child
techniques with a semantic/prior blend, reranks with a small learned network,
and falls back to flat retrieval when calibrated confidence is low. Generation
renders the surviving candidates into a tactic-grouped prompt and enforces the
hierarchy on whatever the backend returns.
"""

from .config import AblationFlags, Config, load_config
from .embedder import EmbedderConfig, Embedding, HashEmbedder, make_embedder
from .evaluation import EvalReport, run_eval
from .generation import AnnotationResult, build_context, build_prompt, parse_output
from .index import VectorIndex, build_index, topk_cosine
from .kb import CooccurrencePrior, Hierarchy, LabeledExample, Tactic, Technique, load_hierarchy
from .pipeline import AnnotationPipeline, build_pipeline
from .reranker import LossWeights, RerankModel, train_reranker
from .retrieval import CandidateSet, RetrievalParams, TechniqueCandidate

__all__ = [
    "AblationFlags",
    "AnnotationPipeline",
    "AnnotationResult",
    "CandidateSet",
    "Config",
    "CooccurrencePrior",
    "EmbedderConfig",
    "Embedding",
    "EvalReport",
    "HashEmbedder",
    "Hierarchy",
    "LabeledExample",
    "LossWeights",
    "RerankModel",
    "RetrievalParams",
    "Tactic",
    "Technique",
    "TechniqueCandidate",
    "VectorIndex",
    "build_context",
    "build_index",
    "build_pipeline",
    "build_prompt",
    "load_config",
    "load_hierarchy",
    "make_embedder",
    "parse_output",
    "run_eval",
    "topk_cosine",
    "train_reranker",
]

__version__ = "0.1.0"
