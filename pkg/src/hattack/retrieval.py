"""Two-stage hierarchical retrieval and the flat baseline.

Stage one ranks tactics by cosine against the query and keeps the top M.
Stage two scores every technique under each candidate tactic with a blend of
semantic similarity and the tactic-conditional prior, keeps the per-tactic
top K_A, and unions the survivors. Candidate counts are therefore bounded by
M * K_A regardless of taxonomy size.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .embedder import Embedding
from .errors import NotPartitioned
from .index import VectorIndex, topk_cosine
from .kb import CooccurrencePrior


@dataclass
class RetrievalParams:
    M: int = 3
    K_A: int = 15
    alpha: float = 0.7
    beta: float = 0.3
    theta: float = 0.3
    flat_k: int = 45

    def __post_init__(self) -> None:
        if self.M < 1 or self.K_A < 1 or self.flat_k < 1:
            raise ValueError("M, K_A and flat_k must be positive")
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if abs(self.alpha + self.beta - 1.0) > 1e-9:
            raise ValueError(f"alpha + beta must equal 1, got {self.alpha + self.beta}")

    def without_prior(self) -> "RetrievalParams":
        """Variant for the no-prior ablation: semantic score only."""
        return replace(self, alpha=1.0, beta=0.0)


@dataclass
class TechniqueCandidate:
    technique: str
    tactic: str
    semantic: float
    prior: float
    joint: float
    tactic_score: float = 0.0
    rerank: float | None = None
    confidence: float | None = None
    # Feature vector for the reranker, attached after retrieval.
    features: np.ndarray | None = field(default=None, repr=False)

    def to_json_dict(self) -> dict:
        return {
            "technique": self.technique,
            "tactic": self.tactic,
            "semantic": self.semantic,
            "prior": self.prior,
            "joint": self.joint,
            "tactic_score": self.tactic_score,
            "rerank": self.rerank,
            "confidence": self.confidence,
        }


@dataclass
class CandidateSet:
    query_id: str
    tactic_candidates: list[tuple[str, float]]
    technique_candidates: list[TechniqueCandidate]
    flat: bool = False

    def candidate_tactic_ids(self) -> set[str]:
        return {tactic for tactic, _ in self.tactic_candidates}

    def technique_ids(self) -> list[str]:
        return [c.technique for c in self.technique_candidates]


def _candidate_order(candidate: TechniqueCandidate) -> tuple[float, str]:
    return (-candidate.joint, candidate.technique)


def retrieve_tactics(query: Embedding, tactic_index: VectorIndex,
                     M: int) -> list[tuple[str, float]]:
    """Top-M tactics by cosine, descending score, ties by ascending id."""
    return topk_cosine(tactic_index, query, k=M)


def retrieve_techniques(query: Embedding, tactics: Sequence[tuple[str, float]],
                        technique_index: VectorIndex, prior: CooccurrencePrior,
                        params: RetrievalParams) -> CandidateSet:
    """Score every child of each candidate tactic and keep the per-tactic top K_A.

    joint = alpha * cosine + beta * P(technique | tactic). Cosine may be
    negative while the prior is non-negative; the blend is taken as-is, so
    joint scores can be negative.
    """
    if technique_index.partition is None:
        raise NotPartitioned("technique index must be partitioned by tactic")

    selected: list[TechniqueCandidate] = []
    for tactic_id, tactic_score in tactics:
        children = topk_cosine(technique_index, query, k=len(technique_index),
                               restrict={tactic_id})
        scored = [
            TechniqueCandidate(
                technique=tech_id,
                tactic=tactic_id,
                semantic=semantic,
                prior=prior.prob(tactic_id, tech_id),
                joint=params.alpha * semantic + params.beta * prior.prob(tactic_id, tech_id),
                tactic_score=tactic_score,
            )
            for tech_id, semantic in children
        ]
        scored.sort(key=_candidate_order)
        selected.extend(scored[:params.K_A])

    selected.sort(key=_candidate_order)
    return CandidateSet(
        query_id=query.id,
        tactic_candidates=list(tactics),
        technique_candidates=selected,
        flat=False,
    )


def retrieve_flat(query: Embedding, technique_index: VectorIndex, k: int) -> CandidateSet:
    """Global top-k over all techniques by pure cosine (baseline and fallback).

    Prior and joint fields carry the semantic score so candidate ordering
    stays well defined; tactic candidates are empty by construction.
    """
    hits = topk_cosine(technique_index, query, k=k)
    parents = technique_index.parent_of_row()
    candidates = [
        TechniqueCandidate(
            technique=tech_id,
            tactic=parents.get(tech_id, ""),
            semantic=semantic,
            prior=semantic,
            joint=semantic,
            tactic_score=0.0,
        )
        for tech_id, semantic in hits
    ]
    return CandidateSet(
        query_id=query.id,
        tactic_candidates=[],
        technique_candidates=candidates,
        flat=True,
    )


def candidate_reduction(candidates: CandidateSet, total_techniques: int) -> float:
    """Fraction of the technique space pruned away: 1 - |C_T| / total."""
    n = len(candidates.technique_candidates)
    if total_techniques < n:
        raise ValueError(
            f"total_techniques={total_techniques} smaller than candidate count {n}")
    return 1.0 - n / total_techniques
