"""Scoring and evaluation harness.

Micro-averaged precision/recall/F1 pool true/false positives over the whole
corpus. MAP@10 is computed over the calibrated candidate ranking (the list the
generator chooses from), not the final predictions, so it measures ranking
quality independently of the generation step. Tactic accuracy is the mean
Jaccard overlap between predicted and true parent-tactic sets. The consistency
rate reads raw pre-enforcement predictions from traces, matching how the
underlying behavior would look without enforcement.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import AbstractSet, Sequence

import numpy as np

from .config import AblationFlags, Config, config_fingerprint
from .errors import LengthMismatch
from .generation import AnnotationResult
from .kb import Hierarchy, LabeledExample, load_corpus
from .pipeline import (
    REPORT_CSV_FILE,
    REPORT_JSON_FILE,
    AnnotationPipeline,
    build_pipeline,
    workdir_path,
)

SCALAR_FIELDS = (
    "precision", "recall", "f1", "map_at_10", "tactic_accuracy", "consistency_rate",
    "mean_latency_ms", "p95_latency_ms", "mean_candidates", "mean_api_calls",
)


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    map_at_10: float
    tactic_accuracy: float
    consistency_rate: float
    mean_latency_ms: float
    p95_latency_ms: float
    mean_candidates: float
    mean_api_calls: float
    config_fingerprint: str
    per_example: list[dict] = field(default_factory=list)

    def scalar_row(self) -> dict:
        row = {"config_fingerprint": self.config_fingerprint}
        row.update({name: getattr(self, name) for name in SCALAR_FIELDS})
        return row

    def to_json_dict(self) -> dict:
        data = self.scalar_row()
        data["per_example"] = self.per_example
        return data


def micro_prf(predictions: Sequence[AbstractSet[str]],
              truths: Sequence[AbstractSet[str]]) -> tuple[float, float, float]:
    """Pooled precision/recall/F1; zero denominators score zero."""
    if len(predictions) != len(truths):
        raise LengthMismatch(f"{len(predictions)} prediction sets vs {len(truths)} truths")
    tp = fp = fn = 0
    for pred, truth in zip(predictions, truths):
        tp += len(pred & truth)
        fp += len(pred - truth)
        fn += len(truth - pred)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def ap_at_k(ranked: Sequence[str], truth: AbstractSet[str], k: int = 10) -> float:
    """Average precision at k with the min(|truth|, k) normalizer."""
    if not truth:
        raise ValueError("average precision undefined for empty truth")
    hits = 0
    total = 0.0
    for position, item in enumerate(ranked[:k], start=1):
        if item in truth:
            hits += 1
            total += hits / position
    return total / min(len(truth), k)


def map_at_k(ranked: Sequence[Sequence[str]], truths: Sequence[AbstractSet[str]],
             k: int = 10) -> float:
    """Mean AP@k over queries; queries with empty truth are skipped."""
    if len(ranked) != len(truths):
        raise LengthMismatch(f"{len(ranked)} rankings vs {len(truths)} truths")
    scores = [ap_at_k(r, t, k) for r, t in zip(ranked, truths) if t]
    return float(np.mean(scores)) if scores else 0.0


def tactic_accuracy(predictions: Sequence[AbstractSet[str]],
                    truths: Sequence[AbstractSet[str]], h: Hierarchy) -> float:
    """Mean Jaccard overlap of predicted vs true parent-tactic sets.

    Two empty sets count as perfect agreement; the paper names this metric
    without defining it, so Jaccard is a documented choice.
    """
    if len(predictions) != len(truths):
        raise LengthMismatch(f"{len(predictions)} prediction sets vs {len(truths)} truths")
    scores = []
    for pred, truth in zip(predictions, truths):
        pred_tactics = {h.parent_of(t) for t in pred}
        true_tactics = {h.parent_of(t) for t in truth}
        union = pred_tactics | true_tactics
        scores.append(len(pred_tactics & true_tactics) / len(union) if union else 1.0)
    return float(np.mean(scores)) if scores else 0.0


def consistency_rate(results: Sequence[AnnotationResult],
                     h: Hierarchy | None = None) -> float:
    """Fraction of raw (pre-enforcement) predictions whose parent tactic was
    retrieved; results with no raw predictions are excluded entirely.

    Parents resolve through the hierarchy when given, otherwise through the
    candidate records in the trace; unresolvable ids count as inconsistent.
    """
    consistent = total = 0
    for result in results:
        raw = result.trace.raw_predictions
        if not raw:
            continue
        retrieved = {tactic for tactic, _ in result.trace.tactic_candidates}
        parent_by_candidate = {c["technique"]: c["tactic"]
                               for c in result.trace.technique_candidates}
        for tid in raw:
            total += 1
            if h is not None and h.has_technique(tid):
                parent = h.parent_of(tid)
            else:
                parent = parent_by_candidate.get(tid)
            if parent is not None and parent in retrieved:
                consistent += 1
    return consistent / total if total else 0.0


def evaluate_pipeline(pipeline: AnnotationPipeline, corpus: Sequence[LabeledExample],
                      fingerprint: str, workers: int = 1) -> EvalReport:
    """Annotate every example, measure wall-clock latency, aggregate metrics."""

    def run_one(item: LabeledExample) -> tuple[AnnotationResult, float]:
        started = time.perf_counter()
        result = pipeline.annotate(item.text, query_id=item.id)
        return result, (time.perf_counter() - started) * 1000.0

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_one, corpus))
    else:
        outcomes = [run_one(item) for item in corpus]

    results = [r for r, _ in outcomes]
    latencies = np.array([ms for _, ms in outcomes]) if outcomes else np.zeros(1)
    predictions = [set(r.technique_ids()) for r in results]
    truths = [set(item.techniques) for item in corpus]
    rankings = [[c["technique"] for c in r.trace.technique_candidates] for r in results]

    precision, recall, f1 = micro_prf(predictions, truths)
    per_example = []
    for item, (result, latency), truth in zip(corpus, outcomes, truths):
        per_example.append({
            "id": item.id,
            "predictions": sorted(set(result.technique_ids())),
            "truth": sorted(truth),
            "candidates": len(result.trace.technique_candidates),
            "api_calls": result.trace.api_calls,
            "fallback": result.trace.fallback,
            "latency_ms": latency,
            "ap_at_10": ap_at_k([c["technique"] for c in result.trace.technique_candidates],
                                truth) if truth else None,
        })

    return EvalReport(
        precision=precision,
        recall=recall,
        f1=f1,
        map_at_10=map_at_k(rankings, truths),
        tactic_accuracy=tactic_accuracy(predictions, truths, pipeline.hierarchy),
        consistency_rate=consistency_rate(results, pipeline.hierarchy),
        mean_latency_ms=float(np.mean(latencies)),
        p95_latency_ms=float(np.percentile(latencies, 95)),
        mean_candidates=float(np.mean([p["candidates"] for p in per_example]))
        if per_example else 0.0,
        mean_api_calls=float(np.mean([p["api_calls"] for p in per_example]))
        if per_example else 0.0,
        config_fingerprint=fingerprint,
        per_example=per_example,
    )


def run_eval(config: Config, corpus_path: str | Path,
             flags: AblationFlags | None = None) -> EvalReport:
    """Build the pipeline from workdir artifacts and evaluate a labeled corpus."""
    flags = flags if flags is not None else config.eval.flags()
    pipeline = build_pipeline(config, flags=flags)
    corpus = load_corpus(corpus_path)
    return evaluate_pipeline(pipeline, corpus, config_fingerprint(config, flags),
                             workers=config.eval.workers)


def write_report_json(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_json_dict(), indent=1), encoding="utf-8")


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    row = report.scalar_row()
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)


def write_reports(report: EvalReport, config: Config) -> tuple[Path, Path]:
    json_path = workdir_path(config, REPORT_JSON_FILE)
    csv_path = workdir_path(config, REPORT_CSV_FILE)
    write_report_json(report, json_path)
    write_report_csv(report, csv_path)
    return json_path, csv_path
