"""Learned candidate reranking with hierarchy-aware features.

Each candidate is scored by a one-hidden-layer ReLU network over the
concatenation [technique embedding; parent-tactic embedding; tactic retrieval
score; tactic-conditional prior]. Confidence multiplies the raw score by an
indicator that the parent tactic was actually retrieved; when the best
confidence falls below a threshold the whole candidate set is replaced by
global flat retrieval.

Only the reranker parameters train. Tactic/technique retrieval losses are
computed as diagnostics; the encoder behind the embeddings is an external
backend and carries no gradient.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import AbstractSet, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .embedder import Embedding
from .errors import (
    DimensionMismatch,
    DivergedLoss,
    EmptyCandidates,
    EmptyTruth,
    NoValidationData,
    UnknownTechnique,
)
from .index import VectorIndex, topk_cosine
from .kb import CooccurrencePrior, Hierarchy
from .retrieval import CandidateSet, retrieve_flat


@dataclass
class RerankModel:
    """Parameters of the scoring network: score(f) = w . relu(W_r f + b_r)."""

    W_r: np.ndarray  # hidden x (2d + 2)
    b_r: np.ndarray  # hidden
    w: np.ndarray    # hidden
    seed: int = 42

    def __post_init__(self) -> None:
        hidden, fdim = self.W_r.shape
        if self.b_r.shape != (hidden,) or self.w.shape != (hidden,):
            raise DimensionMismatch(
                f"inconsistent shapes: W_r {self.W_r.shape}, b_r {self.b_r.shape}, "
                f"w {self.w.shape}")
        if fdim < 4 or fdim % 2 != 0:
            raise DimensionMismatch(f"feature dimension {fdim} is not 2d+2 for any d >= 1")
        for name, arr in (("W_r", self.W_r), ("b_r", self.b_r), ("w", self.w)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} contains non-finite values")

    @property
    def hidden(self) -> int:
        return int(self.W_r.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.W_r.shape[1])

    @property
    def dimension(self) -> int:
        return (self.feature_dim - 2) // 2

    @classmethod
    def initialize(cls, dimension: int, hidden: int = 64, seed: int = 42) -> "RerankModel":
        """Scaled-uniform init keeping initial pre-activations O(1); biases start at zero."""
        fdim = 2 * dimension + 2
        rng = np.random.default_rng(seed)
        bound_w_r = 1.0 / math.sqrt(fdim)
        bound_w = 1.0 / math.sqrt(hidden)
        return cls(
            W_r=rng.uniform(-bound_w_r, bound_w_r, size=(hidden, fdim)),
            b_r=np.zeros(hidden),
            w=rng.uniform(-bound_w, bound_w, size=hidden),
            seed=seed,
        )

    def copy(self) -> "RerankModel":
        return RerankModel(W_r=self.W_r.copy(), b_r=self.b_r.copy(), w=self.w.copy(),
                           seed=self.seed)

    def save(self, path: str | Path) -> None:
        payload = {
            "dimension": self.dimension,
            "hidden": self.hidden,
            "W_r": self.W_r.tolist(),
            "b_r": self.b_r.tolist(),
            "w": self.w.tolist(),
            "seed": self.seed,
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RerankModel":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        model = cls(
            W_r=np.asarray(data["W_r"], dtype=np.float64),
            b_r=np.asarray(data["b_r"], dtype=np.float64),
            w=np.asarray(data["w"], dtype=np.float64),
            seed=int(data.get("seed", 42)),
        )
        if model.hidden != int(data["hidden"]) or model.dimension != int(data["dimension"]):
            raise DimensionMismatch(
                f"checkpoint {path}: declared hidden={data['hidden']} d={data['dimension']} "
                f"do not match stored shapes")
        return model


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self) -> None:
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


def build_features(tech_emb: Embedding | np.ndarray, tactic_emb: Embedding | np.ndarray,
                   tactic_score: float, prior: float) -> np.ndarray:
    """Concatenate [technique emb; tactic emb; tactic score; prior], length 2d+2."""
    tech = tech_emb.vector if isinstance(tech_emb, Embedding) else np.asarray(tech_emb)
    tactic = tactic_emb.vector if isinstance(tactic_emb, Embedding) else np.asarray(tactic_emb)
    if tech.shape != tactic.shape:
        raise DimensionMismatch(
            f"technique embedding {tech.shape} vs tactic embedding {tactic.shape}")
    return np.concatenate([tech, tactic, [float(tactic_score)], [float(prior)]])


def rerank_score(model: RerankModel, features: np.ndarray) -> float:
    """Forward pass for a single feature vector, in float64."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (model.feature_dim,):
        raise DimensionMismatch(
            f"feature length {features.shape} != model feature dim {model.feature_dim}")
    hidden = np.maximum(model.W_r @ features + model.b_r, 0.0)
    return float(model.w @ hidden)


def batch_rerank_scores(model: RerankModel, features: np.ndarray) -> np.ndarray:
    """Forward pass for an (n, 2d+2) feature matrix."""
    if features.shape[1] != model.feature_dim:
        raise DimensionMismatch(
            f"feature width {features.shape[1]} != model feature dim {model.feature_dim}")
    return np.maximum(features @ model.W_r.T + model.b_r, 0.0) @ model.w


@dataclass
class FeatureContext:
    """Per-query inputs needed to build features for any candidate technique."""

    tactic_index: VectorIndex
    technique_index: VectorIndex
    tactic_scores: dict[str, float]
    prior: CooccurrencePrior

    @classmethod
    def for_query(cls, query: Embedding, tactic_index: VectorIndex,
                  technique_index: VectorIndex, prior: CooccurrencePrior) -> "FeatureContext":
        scores = dict(topk_cosine(tactic_index, query, k=len(tactic_index)))
        return cls(tactic_index=tactic_index, technique_index=technique_index,
                   tactic_scores=scores, prior=prior)


def attach_features(candidates: CandidateSet, ctx: FeatureContext) -> CandidateSet:
    """Populate each candidate's feature vector (and its parent-tactic score).

    The prior feature is always P(T | parent(T)), independent of how the
    candidate was retrieved; flat candidates carry the semantic score in
    their ``prior`` field, which is deliberately not reused here.
    """
    cands = candidates.technique_candidates
    if not cands:
        return candidates
    tech_rows = np.stack([ctx.technique_index.vector(c.technique) for c in cands])
    tactic_rows = np.stack([ctx.tactic_index.vector(c.tactic) for c in cands])
    scores = np.array([ctx.tactic_scores[c.tactic] for c in cands], dtype=np.float64)
    priors = np.array([ctx.prior.prob(c.tactic, c.technique) for c in cands], dtype=np.float64)
    matrix = np.concatenate([tech_rows, tactic_rows, scores[:, None], priors[:, None]], axis=1)
    for cand, row, score in zip(cands, matrix, scores):
        cand.features = row
        cand.tactic_score = float(score)
    return candidates


def calibrate(candidates: CandidateSet, model: RerankModel) -> CandidateSet:
    """Score candidates and zero the confidence of those whose parent tactic
    was not retrieved; re-sort by descending confidence, ties by ascending id.
    """
    cands = candidates.technique_candidates
    if not cands:
        return candidates
    if any(c.features is None for c in cands):
        raise ValueError("candidates must carry features before calibration")
    scores = batch_rerank_scores(model, np.stack([c.features for c in cands]))
    retrieved = candidates.candidate_tactic_ids()
    for cand, score in zip(cands, scores):
        cand.rerank = float(score)
        cand.confidence = float(score) if cand.tactic in retrieved else 0.0
    cands.sort(key=lambda c: (-c.confidence, c.technique))
    return candidates


def confidence_from_joint(candidates: CandidateSet) -> CandidateSet:
    """No-rerank variant: confidence is the joint retrieval score."""
    for cand in candidates.technique_candidates:
        cand.confidence = cand.joint
    candidates.technique_candidates.sort(key=lambda c: (-(c.confidence or 0.0), c.technique))
    return candidates


def apply_fallback(candidates: CandidateSet, query: Embedding, model: RerankModel | None,
                   ctx: FeatureContext, theta: float, K: int) -> tuple[CandidateSet, bool]:
    """Replace the candidate set with global flat retrieval when the best
    calibrated confidence falls below ``theta``.

    The max over an empty candidate set is -inf, so empty sets always fall
    back. ``model=None`` covers the no-rerank ablation: the fallback set then
    takes its confidence from the joint score.
    """
    max_confidence = max(
        (c.confidence for c in candidates.technique_candidates if c.confidence is not None),
        default=-math.inf,
    )
    if max_confidence >= theta:
        return candidates, False

    flat = retrieve_flat(query, ctx.technique_index, K)
    attach_features(flat, ctx)
    if model is None:
        confidence_from_joint(flat)
    else:
        calibrate(flat, model)
    return flat, True


# --- loss functions -----------------------------------------------------------


def _log_softmax_terms(scores: np.ndarray, picked: Iterable[int]) -> float:
    lse = float(logsumexp(scores))
    return float(sum(lse - scores[i] for i in picked))


def loss_tactic(tactic_scores: Mapping[str, float], true_tactics: AbstractSet[str]) -> float:
    """Cross-entropy of the true tactics under a softmax over all tactic scores."""
    if not true_tactics:
        raise EmptyTruth("true tactic set is empty")
    ids = sorted(tactic_scores)
    missing = set(true_tactics) - set(ids)
    if missing:
        raise ValueError(f"no score for true tactics: {sorted(missing)}")
    scores = np.array([tactic_scores[i] for i in ids], dtype=np.float64)
    picked = [ids.index(t) for t in sorted(true_tactics)]
    return _log_softmax_terms(scores, picked)


def loss_technique(h: Hierarchy, joint_scores: Mapping[str, float],
                   true_techniques: AbstractSet[str]) -> float:
    """Cross-entropy of each true technique under a softmax over its siblings only."""
    if not true_techniques:
        raise EmptyTruth("true technique set is empty")
    total = 0.0
    for tech_id in sorted(true_techniques):
        if not h.has_technique(tech_id):
            raise UnknownTechnique(f"technique {tech_id} not in hierarchy")
        siblings = h.children_of(h.parent_of(tech_id))
        try:
            scores = np.array([joint_scores[s] for s in siblings], dtype=np.float64)
        except KeyError as exc:
            raise ValueError(f"missing joint score for sibling {exc.args[0]}") from exc
        total += _log_softmax_terms(scores, [siblings.index(tech_id)])
    return total


def loss_rerank(model: RerankModel, candidates: CandidateSet,
                true_techniques: AbstractSet[str]) -> float:
    """Listwise cross-entropy over the candidate set.

    True techniques absent from the candidate set contribute nothing; an
    empty intersection yields 0 (the caller decides whether to count a skip).
    """
    cands = candidates.technique_candidates
    if not cands:
        return 0.0
    in_set = [i for i, c in enumerate(cands) if c.technique in true_techniques]
    if not in_set:
        return 0.0
    if any(c.features is None for c in cands):
        raise ValueError("candidates must carry features to compute the rerank loss")
    scores = batch_rerank_scores(model, np.stack([c.features for c in cands]))
    return _log_softmax_terms(scores, in_set)


def loss_consistency(candidates: CandidateSet, model: RerankModel) -> float:
    """Mean rerank score of candidates whose parent tactic was not retrieved.

    Zero for purely hierarchical candidate sets; may be negative when rerank
    scores are negative.
    """
    cands = candidates.technique_candidates
    if not cands:
        raise EmptyCandidates("consistency loss undefined for an empty candidate set")
    if any(c.features is None for c in cands):
        raise ValueError("candidates must carry features to compute the consistency loss")
    retrieved = candidates.candidate_tactic_ids()
    mask = np.array([0.0 if c.tactic in retrieved else 1.0 for c in cands])
    scores = batch_rerank_scores(model, np.stack([c.features for c in cands]))
    return float(np.sum(mask * scores) / len(cands))


def total_loss(parts: Sequence[float], weights: LossWeights) -> float:
    """Weighted multi-task sum: tactic + l1*technique + l2*rerank + l3*consistency."""
    tactic, technique, rerank, consistency = parts
    return (tactic + weights.lambda1 * technique + weights.lambda2 * rerank
            + weights.lambda3 * consistency)


# --- training ------------------------------------------------------------------


@dataclass
class TrainingExample:
    """Precomputed tensors for one query: retrieval does not depend on the
    reranker, so candidates and features are fixed for the whole run."""

    query_id: str
    features: np.ndarray        # (n, 2d+2)
    truth_rows: np.ndarray      # candidate rows holding true techniques (may be empty)
    inconsistent: np.ndarray    # (n,) 1.0 where parent tactic not in C_A


def make_training_example(candidates: CandidateSet,
                          true_techniques: AbstractSet[str]) -> TrainingExample:
    cands = candidates.technique_candidates
    if not cands:
        raise EmptyCandidates("cannot build a training example without candidates")
    if any(c.features is None for c in cands):
        raise ValueError("candidates must carry features to build a training example")
    retrieved = candidates.candidate_tactic_ids()
    return TrainingExample(
        query_id=candidates.query_id,
        features=np.stack([c.features for c in cands]),
        truth_rows=np.array(
            [i for i, c in enumerate(cands) if c.technique in true_techniques], dtype=int),
        inconsistent=np.array(
            [0.0 if c.tactic in retrieved else 1.0 for c in cands], dtype=np.float64),
    )


@dataclass
class Gradients:
    W_r: np.ndarray
    b_r: np.ndarray
    w: np.ndarray


def loss_and_grads(model: RerankModel, examples: Sequence[TrainingExample],
                   weights: LossWeights) -> tuple[float, Gradients]:
    """Mean of l2*rerank_loss + l3*consistency_loss over examples, with
    analytic gradients with respect to (W_r, b_r, w) only.
    """
    d_w_r = np.zeros_like(model.W_r)
    d_b_r = np.zeros_like(model.b_r)
    d_w = np.zeros_like(model.w)
    total = 0.0

    for example in examples:
        feats = example.features
        n = feats.shape[0]
        pre = feats @ model.W_r.T + model.b_r          # (n, hidden)
        act = np.maximum(pre, 0.0)
        scores = act @ model.w                          # (n,)

        grad_scores = np.zeros(n)
        if example.truth_rows.size:
            lse = float(logsumexp(scores))
            probs = np.exp(scores - lse)
            k = example.truth_rows.size
            total += weights.lambda2 * (k * lse - float(scores[example.truth_rows].sum()))
            grad_scores += weights.lambda2 * k * probs
            grad_scores[example.truth_rows] -= weights.lambda2
        consistency = float(example.inconsistent @ scores) / n
        total += weights.lambda3 * consistency
        grad_scores += weights.lambda3 * example.inconsistent / n

        d_w += act.T @ grad_scores
        grad_pre = (grad_scores[:, None] * model.w[None, :]) * (pre > 0.0)
        d_w_r += grad_pre.T @ feats
        d_b_r += grad_pre.sum(axis=0)

    count = max(len(examples), 1)
    return total / count, Gradients(W_r=d_w_r / count, b_r=d_b_r / count, w=d_w / count)


def evaluate_loss(model: RerankModel, examples: Sequence[TrainingExample],
                  weights: LossWeights) -> float:
    loss, _ = loss_and_grads(model, examples, weights)
    return loss


class Adam:
    """Adam with the conventional constants (beta1 0.9, beta2 0.999, eps 1e-8)."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self._t += 1
        for name, param in params.items():
            grad = grads[name]
            m = self._m.setdefault(name, np.zeros_like(param))
            v = self._v.setdefault(name, np.zeros_like(param))
            m *= self.beta1
            m += (1 - self.beta1) * grad
            v *= self.beta2
            v += (1 - self.beta2) * grad * grad
            m_hat = m / (1 - self.beta1 ** self._t)
            v_hat = v / (1 - self.beta2 ** self._t)
            param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainerConfig:
    lr: float = 1e-4
    batch: int = 32
    patience: int = 5
    max_epochs: int = 200
    seed: int = 42


@dataclass
class TrainLogEntry:
    epoch: int
    train_loss: float
    val_loss: float


def train_reranker(model: RerankModel, train: Sequence[TrainingExample],
                   val: Sequence[TrainingExample], hyper: TrainerConfig,
                   weights: LossWeights) -> tuple[RerankModel, list[TrainLogEntry]]:
    """Minimize l2*rerank + l3*consistency over (W_r, b_r, w) with Adam and
    patience-based early stopping; returns the best-validation parameters.

    Examples whose truth never reached the candidate set contribute only the
    consistency term (their listwise term is an empty sum); the caller is
    expected to log how many such examples exist.
    """
    if not val:
        raise NoValidationData("training requires a non-empty validation split")
    if not train:
        raise NoValidationData("training requires a non-empty training split")

    working = model.copy()
    params = {"W_r": working.W_r, "b_r": working.b_r, "w": working.w}
    optimizer = Adam(lr=hyper.lr)
    rng = np.random.default_rng(hyper.seed)

    best = working.copy()
    best_val = math.inf
    epochs_since_best = 0
    log: list[TrainLogEntry] = []

    for epoch in range(1, hyper.max_epochs + 1):
        order = rng.permutation(len(train))
        batch_losses = []
        for start in range(0, len(order), hyper.batch):
            batch = [train[i] for i in order[start:start + hyper.batch]]
            loss, grads = loss_and_grads(working, batch, weights)
            if not math.isfinite(loss):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}")
            optimizer.step(params, {"W_r": grads.W_r, "b_r": grads.b_r, "w": grads.w})
            batch_losses.append(loss)

        train_loss = float(np.mean(batch_losses))
        val_loss = evaluate_loss(working, val, weights)
        if not math.isfinite(val_loss):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        log.append(TrainLogEntry(epoch=epoch, train_loss=train_loss, val_loss=val_loss))

        if val_loss < best_val:
            best_val = val_loss
            best = working.copy()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= hyper.patience:
                break

    return best, log
