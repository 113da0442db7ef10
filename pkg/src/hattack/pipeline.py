"""End-to-end annotation pipeline and artifact wiring.

Composes the stages in order: embed the query, retrieve candidate tactics and
their techniques, attach features, calibrate (or fall back to flat retrieval),
render the tactic-grouped context, and run generation. Ablation flags switch
individual stages off so evaluation can isolate each one's contribution.

Artifacts live under the configured workdir with fixed names so commands
compose without extra flags.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .config import AblationFlags, Config
from .embedder import Embedder, Embedding, make_embedder
from .errors import ParseError
from .generation import (
    AnnotationResult,
    GenerationBackend,
    MockGenerationBackend,
    RemoteGenerationBackend,
    build_context,
    build_prompt,
    generate,
)
from .index import VectorIndex, load_index
from .kb import CooccurrencePrior, Hierarchy, LabeledExample, hierarchy_from_dict
from .reranker import (
    FeatureContext,
    RerankModel,
    TrainingExample,
    apply_fallback,
    attach_features,
    calibrate,
    confidence_from_joint,
    make_training_example,
)
from .retrieval import CandidateSet, RetrievalParams, retrieve_flat, retrieve_tactics, retrieve_techniques

import json

logger = logging.getLogger(__name__)

KB_FILE = "kb.artifact.json"
TACTIC_INDEX_FILE = "tactic_index.json"
TECHNIQUE_INDEX_FILE = "technique_index.json"
MODEL_FILE = "reranker.json"
TRAINING_LOG_FILE = "training_log.csv"
REPORT_JSON_FILE = "report.json"
REPORT_CSV_FILE = "report.csv"


@dataclass
class AnnotationPipeline:
    hierarchy: Hierarchy
    prior: CooccurrencePrior
    embedder: Embedder
    tactic_index: VectorIndex
    technique_index: VectorIndex
    model: RerankModel | None
    backend: GenerationBackend
    params: RetrievalParams
    flags: AblationFlags = field(default_factory=AblationFlags)

    def _params(self) -> RetrievalParams:
        return self.params.without_prior() if self.flags.no_prior else self.params

    def retrieve(self, query: Embedding) -> tuple[CandidateSet, FeatureContext,
                                                  list[tuple[str, float]]]:
        """Candidate retrieval plus the feature context shared by later stages."""
        params = self._params()
        ctx = FeatureContext.for_query(query, self.tactic_index, self.technique_index,
                                       self.prior)
        if self.flags.no_hierarchy:
            candidates = retrieve_flat(query, self.technique_index, params.flat_k)
            tactics: list[tuple[str, float]] = []
        else:
            tactics = retrieve_tactics(query, self.tactic_index, params.M)
            candidates = retrieve_techniques(query, tactics, self.technique_index,
                                             self.prior, params)
        attach_features(candidates, ctx)
        return candidates, ctx, tactics

    def score(self, candidates: CandidateSet) -> CandidateSet:
        if self.flags.no_rerank or self.model is None:
            return confidence_from_joint(candidates)
        return calibrate(candidates, self.model)

    def annotate(self, text: str, query_id: str) -> AnnotationResult:
        started = time.perf_counter()
        query = self.embedder.embed(text, id=query_id)
        candidates, ctx, tactics = self.retrieve(query)
        self.score(candidates)

        used_fallback = False
        if not self.flags.no_fallback and not self.flags.no_hierarchy:
            model = None if self.flags.no_rerank else self.model
            candidates, used_fallback = apply_fallback(
                candidates, query, model, ctx, self._params().theta, self._params().flat_k)

        # The context ablation flattens only the rendering; enforcement still
        # sees the original candidate structure.
        render_set = candidates
        if self.flags.no_hier_context and not candidates.flat:
            render_set = replace(candidates, tactic_candidates=[], flat=True)
        context = build_context(text, render_set, self.hierarchy)
        prompt = build_prompt(context)

        result = generate(prompt, context, self.backend, candidates, self.hierarchy)
        result.trace.tactic_candidates = tactics
        result.trace.fallback = used_fallback
        result.trace.latency_ms = int(round((time.perf_counter() - started) * 1000))
        return result

    def explain(self, result: AnnotationResult) -> str:
        """Human-readable account of every scoring stage for one annotate call."""
        lines = [f"Query: {result.query_id}", "Retrieved tactics:"]
        if result.trace.tactic_candidates:
            for tactic_id, score in result.trace.tactic_candidates:
                lines.append(f"  {tactic_id}  {self.hierarchy.tactic(tactic_id).name}"
                             f"  score={score:.4f}")
        else:
            lines.append("  (none; flat retrieval)")
        lines.append(f"Candidates ({len(result.trace.technique_candidates)}):")
        for cand in result.trace.technique_candidates:
            rerank = cand.get("rerank")
            confidence = cand.get("confidence")
            lines.append(
                f"  {cand['technique']}  tactic={cand['tactic']}"
                f"  semantic={cand['semantic']:.4f}"
                f"  prior={cand['prior']:.4f}"
                f"  joint={cand['joint']:.4f}"
                f"  rerank={'n/a' if rerank is None else f'{rerank:.4f}'}"
                f"  confidence={'n/a' if confidence is None else f'{confidence:.4f}'}")
        lines.append(f"Fallback used: {'yes' if result.trace.fallback else 'no'}")
        lines.append("Predictions:")
        if result.predictions:
            for tactic_id, techniques in result.predictions:
                lines.append(f"  {tactic_id}: {', '.join(techniques)}")
        else:
            lines.append("  (none)")
        if result.dropped:
            lines.append("Dropped:")
            for technique_id, reason in result.dropped:
                lines.append(f"  {technique_id}  {reason}")
        lines.append(f"API calls: {result.trace.api_calls}"
                     f"  Latency: {result.trace.latency_ms} ms")
        return "\n".join(lines)


def prepare_training_examples(pipeline: AnnotationPipeline,
                              corpus: Sequence[LabeledExample]
                              ) -> tuple[list[TrainingExample], int]:
    """Precompute candidate features and truth rows for every corpus example.

    Returns the examples and the number whose ground truth never reached the
    candidate set; those still contribute the consistency term but their
    listwise term is empty, so a high count signals a retrieval problem.
    """
    examples: list[TrainingExample] = []
    missed = 0
    for item in corpus:
        query = pipeline.embedder.embed(item.text, id=item.id)
        candidates, _, _ = pipeline.retrieve(query)
        if not candidates.technique_candidates:
            missed += 1
            continue
        example = make_training_example(candidates, set(item.techniques))
        if example.truth_rows.size == 0:
            missed += 1
        examples.append(example)
    return examples, missed


def workdir_path(config: Config, name: str) -> Path:
    return Path(config.workdir) / name


def load_kb_artifact(config: Config) -> tuple[Hierarchy, CooccurrencePrior]:
    path = workdir_path(config, KB_FILE)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"missing knowledge-base artifact {path}; run build-kb first "
                      f"({exc})") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"corrupt knowledge-base artifact {path}: {exc}") from exc
    hierarchy = hierarchy_from_dict(data["hierarchy"])
    prior = CooccurrencePrior.from_json_dict(data["prior"])
    return hierarchy, prior


def save_kb_artifact(config: Config, hierarchy_dict: dict, prior: CooccurrencePrior) -> None:
    path = workdir_path(config, KB_FILE)
    payload = {"hierarchy": hierarchy_dict, "prior": prior.to_json_dict()}
    path.write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")


def make_backend(config: Config) -> GenerationBackend:
    if config.generation.backend == "mock":
        return MockGenerationBackend()
    return RemoteGenerationBackend(endpoint=config.generation.endpoint,
                                   model=config.generation.model,
                                   timeout_s=config.generation.timeout_s)


def build_pipeline(config: Config, flags: AblationFlags | None = None,
                   require_model: bool = False) -> AnnotationPipeline:
    """Assemble a pipeline from the artifacts in the configured workdir.

    A missing reranker checkpoint downgrades to a freshly initialized model
    with a warning unless ``require_model`` is set.
    """
    hierarchy, prior = load_kb_artifact(config)
    tactic_index = load_index(workdir_path(config, TACTIC_INDEX_FILE))
    technique_index = load_index(workdir_path(config, TECHNIQUE_INDEX_FILE))

    model_path = workdir_path(config, MODEL_FILE)
    if model_path.exists():
        model = RerankModel.load(model_path)
    elif require_model:
        raise OSError(f"missing reranker checkpoint {model_path}; run train-rerank first")
    else:
        logger.warning("no reranker checkpoint at %s; using untrained parameters", model_path)
        model = RerankModel.initialize(dimension=config.embedder.dimension,
                                       hidden=config.reranker.hidden,
                                       seed=config.reranker.seed)

    return AnnotationPipeline(
        hierarchy=hierarchy,
        prior=prior,
        embedder=make_embedder(config.embedder),
        tactic_index=tactic_index,
        technique_index=technique_index,
        model=model,
        backend=make_backend(config),
        params=config.params,
        flags=flags if flags is not None else config.eval.flags(),
    )
