"""Command-line entry points.

All commands read one YAML config (``--config`` or the HATTACK_CONFIG
environment variable) and share a workdir of fixed-name artifacts, so a full
run is: build-kb, index, train-rerank, evaluate. ``annotate`` accepts either a
literal text argument or a path to a JSONL file; ``explain`` is annotate with
the trace rendered for humans.

Exit codes: 0 success; 1 environment, I/O or backend failure; 2 validation or
data failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .config import AblationFlags, Config, config_fingerprint, load_config
from .embedder import make_embedder
from .errors import (
    BackendTimeout,
    BackendUnavailable,
    DimensionMismatch,
    DivergedLoss,
    DuplicateId,
    EmptyCandidates,
    EmptyText,
    EmptyTruth,
    LengthMismatch,
    MissingVector,
    NoValidationData,
    NotPartitioned,
    ParseError,
    PartitionError,
    ServiceError,
    UnknownTechnique,
    UnparseableOutput,
    ValidationError,
)
from .evaluation import run_eval, write_reports
from .index import build_index, save_index
from .kb import (
    compose_tactic_text,
    compose_technique_text,
    estimate_cooccurrence,
    hierarchy_to_dict,
    load_corpus,
    load_hierarchy,
    validate_hierarchy,
)
from .pipeline import (
    MODEL_FILE,
    TACTIC_INDEX_FILE,
    TECHNIQUE_INDEX_FILE,
    TRAINING_LOG_FILE,
    build_pipeline,
    load_kb_artifact,
    prepare_training_examples,
    save_kb_artifact,
    workdir_path,
)
from .reranker import RerankModel, TrainerConfig, train_reranker

logger = logging.getLogger(__name__)

# Backend/transport/filesystem problems map to exit 1; bad inputs to exit 2.
# An unparseable reply surfaces only after the retry budget, i.e. the backend
# would not follow the format, which is an environment problem.
ENV_ERRORS = (OSError, ServiceError, BackendUnavailable, BackendTimeout,
              MissingVector, UnparseableOutput)
DATA_ERRORS = (ValidationError, ParseError, UnknownTechnique, EmptyTruth, EmptyText,
               NoValidationData, DivergedLoss, EmptyCandidates, LengthMismatch,
               DimensionMismatch, DuplicateId, PartitionError, NotPartitioned)


def cmd_build_kb(config: Config) -> int:
    hierarchy = load_hierarchy(config.kb_path)
    violations = validate_hierarchy(hierarchy)
    if violations:
        for violation in violations:
            print(violation, file=sys.stderr)
        return 2
    corpus = load_corpus(config.corpus_train) if config.corpus_train else []
    prior = estimate_cooccurrence(hierarchy, corpus)
    save_kb_artifact(config, hierarchy_to_dict(hierarchy), prior)
    print(f"wrote {workdir_path(config, 'kb.artifact.json')} "
          f"({len(hierarchy.tactics)} tactics, {len(hierarchy.techniques)} techniques, "
          f"prior from {len(corpus)} examples)")
    return 0


def cmd_index(config: Config) -> int:
    hierarchy, _ = load_kb_artifact(config)
    embedder = make_embedder(config.embedder)

    tactic_embeddings = [embedder.embed(compose_tactic_text(t), id=t.id)
                         for t in hierarchy.tactics]
    technique_embeddings = [embedder.embed(compose_technique_text(t), id=t.id)
                            for t in hierarchy.techniques]

    tactic_index = build_index(tactic_embeddings)
    technique_index = build_index(technique_embeddings, partition=hierarchy.child_index)

    tactic_path = workdir_path(config, TACTIC_INDEX_FILE)
    technique_path = workdir_path(config, TECHNIQUE_INDEX_FILE)
    save_index(tactic_index, tactic_path)
    save_index(technique_index, technique_path)
    print(f"wrote {tactic_path} ({len(tactic_index)} rows) and "
          f"{technique_path} ({len(technique_index)} rows)")
    return 0


def _read_annotate_inputs(raw: str) -> list[tuple[str, str]]:
    """A path to a JSONL file yields (id, text) per line; anything else is a
    single literal query."""
    path = Path(raw)
    if path.exists() and path.is_file():
        return [(ex.id, ex.text) for ex in load_corpus(path)]
    return [("input-1", raw)]


def cmd_annotate(config: Config, raw_input: str, explain: bool,
                 output: str | None) -> int:
    pipeline = build_pipeline(config)
    inputs = _read_annotate_inputs(raw_input)
    out_handle = open(output, "w", encoding="utf-8") if output else None
    try:
        for query_id, text in inputs:
            result = pipeline.annotate(text, query_id=query_id)
            line = json.dumps(result.to_json_dict())
            if out_handle:
                out_handle.write(line + "\n")
            else:
                print(line)
            if explain:
                print(pipeline.explain(result))
    finally:
        if out_handle:
            out_handle.close()
    return 0


def cmd_train(config: Config) -> int:
    if not config.corpus_train or not config.corpus_val:
        raise NoValidationData("config must set corpus.train and corpus.val for training")
    pipeline = build_pipeline(config, flags=AblationFlags())
    train_corpus = load_corpus(config.corpus_train)
    val_corpus = load_corpus(config.corpus_val)

    train_examples, train_missed = prepare_training_examples(pipeline, train_corpus)
    val_examples, val_missed = prepare_training_examples(pipeline, val_corpus)
    if train_missed or val_missed:
        logger.info("ground truth missing from candidates for %d train / %d val examples",
                    train_missed, val_missed)

    # Training always restarts from the seeded initialization so reruns are
    # reproducible regardless of any checkpoint already on disk.
    model = RerankModel.initialize(dimension=config.embedder.dimension,
                                   hidden=config.reranker.hidden,
                                   seed=config.reranker.seed)
    hyper = TrainerConfig(lr=config.reranker.lr, batch=config.reranker.batch,
                          patience=config.reranker.patience,
                          max_epochs=config.reranker.max_epochs,
                          seed=config.reranker.seed)
    trained, log = train_reranker(model, train_examples, val_examples, hyper, config.weights)

    model_path = workdir_path(config, MODEL_FILE)
    trained.save(model_path)
    log_path = workdir_path(config, TRAINING_LOG_FILE)
    with open(log_path, "w", encoding="utf-8") as handle:
        handle.write("epoch,train_loss,val_loss\n")
        for entry in log:
            handle.write(f"{entry.epoch},{entry.train_loss:.6f},{entry.val_loss:.6f}\n")

    best_val = min(entry.val_loss for entry in log)
    print(f"wrote {model_path} and {log_path} "
          f"({len(log)} epochs, best val loss {best_val:.6f})")
    return 0


def cmd_eval(config: Config, ablate: Sequence[str]) -> int:
    flags = AblationFlags.from_names(ablate) if ablate else config.eval.flags()
    if not config.corpus_test:
        raise ValidationError("config must set corpus.test for evaluation")
    report = run_eval(config, config.corpus_test, flags)
    json_path, csv_path = write_reports(report, config)
    print(f"fingerprint: {report.config_fingerprint}")
    for name in ("precision", "recall", "f1", "map_at_10", "tactic_accuracy",
                 "consistency_rate", "mean_latency_ms", "mean_candidates",
                 "mean_api_calls"):
        print(f"{name}: {getattr(report, name):.4f}")
    print(f"wrote {json_path} and {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hattack",
        description="Hierarchical tactic-then-technique annotation of CTI text.")
    parser.add_argument("--config", "-c",
                        default=os.environ.get("HATTACK_CONFIG", "hattack.yaml"),
                        help="config file path (default: $HATTACK_CONFIG or hattack.yaml)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        dest="overrides", help="override a config leaf, e.g. retrieval.M=5")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("build-kb", help="validate the hierarchy and estimate the prior")
    sub.add_parser("index", help="embed all tactic and technique cards")

    annotate = sub.add_parser("annotate", help="annotate a text or a JSONL file")
    annotate.add_argument("input", help="literal CTI text, or a path to a JSONL file")
    annotate.add_argument("--explain", action="store_true",
                          help="print a human-readable trace per input")
    annotate.add_argument("--output", help="write result JSONL here instead of stdout")

    explain = sub.add_parser("explain", help="annotate with a human-readable trace")
    explain.add_argument("input", help="literal CTI text, or a path to a JSONL file")
    explain.add_argument("--output", help="write result JSONL here instead of stdout")

    sub.add_parser("train-rerank", help="train the reranker and save the checkpoint")

    evaluate = sub.add_parser("evaluate", help="score a labeled corpus and write reports")
    evaluate.add_argument("--ablate", action="append", default=[],
                          help="disable a stage (repeatable): no_hierarchy, no_rerank, "
                               "no_prior, no_fallback, no_hier_context")
    return parser


def _dispatch(args: argparse.Namespace, config: Config) -> int:
    if args.command == "build-kb":
        return cmd_build_kb(config)
    if args.command == "index":
        return cmd_index(config)
    if args.command == "annotate":
        return cmd_annotate(config, args.input, args.explain, args.output)
    if args.command == "explain":
        return cmd_annotate(config, args.input, True, args.output)
    if args.command == "train-rerank":
        return cmd_train(config)
    if args.command == "evaluate":
        return cmd_eval(config, args.ablate)
    raise ValidationError(f"unknown command {args.command!r}")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, args.overrides)
        return _dispatch(args, config)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ENV_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
