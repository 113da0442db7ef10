"""Independent reference implementations used to check the package.

Everything here is deliberately written from the definitions with plain loops,
not by importing the code under test, so agreement is evidence rather than
tautology.
"""

from __future__ import annotations

import math

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64_reference(data: bytes) -> int:
    value = FNV_OFFSET
    for byte in data:
        value = ((value ^ byte) * FNV_PRIME) % (1 << 64)
    return value


def hash_embed_reference(text: str, dimension: int) -> np.ndarray:
    """Bag-of-tokens feature hashing: FNV-1a bucket, sign from bit 63, L2 norm.

    Returns the unnormalized all-zero vector if every contribution cancels;
    callers decide how to treat that corner.
    """
    vector = np.zeros(dimension)
    for token in text.lower().split():
        digest = fnv1a64_reference(token.encode("utf-8"))
        sign = 1.0 if (digest >> 63) & 1 == 0 else -1.0
        vector[digest % dimension] += sign
    norm = math.sqrt(float(np.dot(vector, vector)))
    return vector / norm if norm else vector


def topk_cosine_reference(ids, matrix, query, k):
    """Full-scan cosine ranking: descending score, ties by ascending id."""
    scored = [(ids[i], float(np.dot(matrix[i], query))) for i in range(len(ids))]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]


def two_stage_reference(query, tactic_ids, tactic_matrix, technique_ids,
                        technique_matrix, parent, prior_prob, M, K_A, alpha, beta):
    """Brute-force two-stage retrieval by full enumeration.

    ``prior_prob`` is a callable (tactic_id, technique_id) -> P(T|A). Returns
    (tactic candidates, technique rows) where each row is
    (technique, tactic, semantic, prior, joint) in final candidate order.
    """
    tactics = topk_cosine_reference(tactic_ids, tactic_matrix, query, M)
    rows = []
    for tactic_id, _ in tactics:
        children = []
        for j, tech_id in enumerate(technique_ids):
            if parent[tech_id] != tactic_id:
                continue
            semantic = float(np.dot(technique_matrix[j], query))
            prior = prior_prob(tactic_id, tech_id)
            children.append((tech_id, tactic_id, semantic, prior,
                             alpha * semantic + beta * prior))
        children.sort(key=lambda r: (-r[4], r[0]))
        rows.extend(children[:K_A])
    rows.sort(key=lambda r: (-r[4], r[0]))
    return tactics, rows


def micro_prf_reference(predictions, truths):
    tp = sum(len(set(p) & set(t)) for p, t in zip(predictions, truths))
    fp = sum(len(set(p) - set(t)) for p, t in zip(predictions, truths))
    fn = sum(len(set(t) - set(p)) for p, t in zip(predictions, truths))
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if (precision + recall) > 0 else 0.0
    return precision, recall, f1


def ap_at_k_reference(ranked, truth, k=10):
    truth = set(truth)
    hits = 0
    acc = 0.0
    for i, item in enumerate(ranked[:k], start=1):
        if item in truth:
            hits += 1
            acc += hits / i
    return acc / min(len(truth), k)


def map_at_k_reference(rankings, truths, k=10):
    scores = [ap_at_k_reference(r, t, k) for r, t in zip(rankings, truths) if t]
    return sum(scores) / len(scores) if scores else 0.0


def jaccard_tactic_reference(predictions, truths, parent):
    scores = []
    for pred, truth in zip(predictions, truths):
        a = {parent[t] for t in pred}
        b = {parent[t] for t in truth}
        union = a | b
        scores.append(len(a & b) / len(union) if union else 1.0)
    return sum(scores) / len(scores) if scores else 0.0


def listwise_loss_reference(scores, truth_indices):
    """Direct evaluation: -sum over truths of log softmax(scores)."""
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - scores.max()
    log_z = math.log(float(np.sum(np.exp(shifted)))) + float(scores.max())
    return float(sum(log_z - scores[i] for i in truth_indices))


def training_loss_reference(W_r, b_r, w, examples, lambda2, lambda3):
    """Plain-loop forward pass of the training objective (mean over examples).

    ``examples`` yield (features, truth_rows, inconsistent_mask).
    """
    total = 0.0
    for features, truth_rows, mask in examples:
        scores = []
        for row in features:
            pre = W_r @ row + b_r
            act = np.where(pre > 0.0, pre, 0.0)
            scores.append(float(w @ act))
        scores = np.asarray(scores)
        if len(truth_rows):
            total += lambda2 * listwise_loss_reference(scores, truth_rows)
        total += lambda3 * float(np.sum(np.asarray(mask) * scores)) / len(scores)
    return total / max(len(examples), 1)


def finite_difference_grads(W_r, b_r, w, examples, lambda2, lambda3, eps=1e-5):
    """Central finite differences of the training objective for each tensor."""
    grads = []
    for tensor in (W_r, b_r, w):
        grad = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        flat_grad = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            up = training_loss_reference(W_r, b_r, w, examples, lambda2, lambda3)
            flat[i] = original - eps
            down = training_loss_reference(W_r, b_r, w, examples, lambda2, lambda3)
            flat[i] = original
            flat_grad[i] = (up - down) / (2 * eps)
        grads.append(grad)
    return tuple(grads)
