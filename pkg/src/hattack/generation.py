"""Tactic-grouped context rendering, prompting, and output parsing.

The context groups candidate techniques under their parent tactics instead of
concatenating everything, which keeps the prompt to roughly the candidate
budget times one description rather than the whole knowledge base. Generation
goes through a backend interface: a remote chat-completions endpoint for real
runs, or a deterministic mock for tests and offline evaluation. Replies are
parsed back into per-tactic predictions and anything violating the hierarchy
constraints is dropped, not remapped.
"""

from __future__ import annotations

import math
import re
import statistics
from dataclasses import dataclass, field
from typing import Protocol

import requests

from .errors import BackendTimeout, BackendUnavailable, EmptyCandidates, UnparseableOutput
from .kb import TECHNIQUE_ID_SCAN, Hierarchy
from .retrieval import CandidateSet

# Instruction and output-format blocks are fixed strings; only the context
# between them varies per query.
INSTRUCTION_BLOCK = (
    "You are a cybersecurity expert. Based on the hierarchical\n"
    "ATT&CK knowledge:\n"
    "\n"
    "1. First, identify which tactics are most relevant\n"
    "2. Then, select techniques from the candidate set\n"
    "3. Ensure each predicted technique belongs to one of\n"
    "   the candidate tactics\n"
)

OUTPUT_FORMAT_BLOCK = (
    "Output format:\n"
    "- Tactic: {A_i}\n"
    "  - Techniques: {T_j}, {T_k}\n"
)

RETRY_SUFFIX = "\nRespond only in the specified output format.\n"

FALLBACK_LABEL = "(fallback)"

_TECH_LINE = re.compile(r"techniques?\s*:", re.IGNORECASE)


@dataclass
class HierarchicalContext:
    """Rendered context plus the structure it was rendered from.

    ``groups`` holds (tactic_id, tactic_score, [(technique_id, description)])
    ordered by descending tactic score; techniques within a group are ordered
    by descending confidence. ``group_confidences`` carries each group's top
    confidence so a backend can reason about group strength without re-scoring.
    A flat candidate set renders as one pseudo-group with an empty tactic id.
    """

    query_text: str
    groups: list[tuple[str, float, list[tuple[str, str]]]]
    rendered: str
    token_estimate: int
    group_confidences: list[float] = field(default_factory=list)


@dataclass
class AnnotationTrace:
    """Everything needed to explain one annotate call."""

    tactic_candidates: list[tuple[str, float]]
    technique_candidates: list[dict]
    fallback: bool
    raw_text: str
    api_calls: int
    latency_ms: int
    raw_predictions: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "tactic_candidates": [[t, s] for t, s in self.tactic_candidates],
            "technique_candidates": self.technique_candidates,
            "fallback": self.fallback,
            "raw_text": self.raw_text,
            "api_calls": self.api_calls,
            "latency_ms": self.latency_ms,
            "raw_predictions": list(self.raw_predictions),
        }


@dataclass
class AnnotationResult:
    query_id: str
    predictions: list[tuple[str, list[str]]]
    dropped: list[tuple[str, str]]
    trace: AnnotationTrace

    def technique_ids(self) -> list[str]:
        return [tid for _, techs in self.predictions for tid in techs]

    def to_json_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "predictions": [[tactic, list(techs)] for tactic, techs in self.predictions],
            "dropped": [[tid, reason] for tid, reason in self.dropped],
            "trace": self.trace.to_json_dict(),
        }


class GenerationBackend(Protocol):
    name: str

    def complete(self, prompt: str, ctx: HierarchicalContext) -> str: ...


def build_context(query_text: str, candidates: CandidateSet, h: Hierarchy) -> HierarchicalContext:
    """Render the tactic-grouped context for a calibrated candidate set."""
    cands = candidates.technique_candidates
    if not cands:
        raise EmptyCandidates(f"no candidates to render for query {candidates.query_id!r}")

    ordered = sorted(cands, key=lambda c: (-(c.confidence or 0.0), c.technique))
    groups: list[tuple[str, float, list[tuple[str, str]]]] = []
    confidences: list[float] = []

    if candidates.flat:
        groups.append(("", 0.0, [(c.technique, h.technique(c.technique).description)
                                 for c in ordered]))
        confidences.append(ordered[0].confidence or 0.0)
    else:
        score_of = dict(candidates.tactic_candidates)
        by_tactic: dict[str, list] = {}
        for cand in ordered:
            by_tactic.setdefault(cand.tactic, []).append(cand)
        for tactic_id in sorted(by_tactic, key=lambda t: (-score_of.get(t, 0.0), t)):
            members = by_tactic[tactic_id]
            groups.append((tactic_id, score_of.get(tactic_id, 0.0),
                           [(c.technique, h.technique(c.technique).description)
                            for c in members]))
            confidences.append(members[0].confidence or 0.0)

    blocks = []
    for tactic_id, score, techs in groups:
        header = (f"[Tactic: {FALLBACK_LABEL}]" if not tactic_id
                  else f"[Tactic: {h.tactic(tactic_id).name} (Score: {score:.3f})]")
        lines = [header] + [f"  - Technique {tid}: {desc}" for tid, desc in techs]
        blocks.append("\n".join(lines))

    rendered = (f'Given CTI text: "{query_text}"\n'
                "\n"
                "Relevant Tactics and Techniques:\n"
                "\n"
                + "\n\n".join(blocks) + "\n")
    return HierarchicalContext(
        query_text=query_text,
        groups=groups,
        rendered=rendered,
        token_estimate=math.ceil(len(rendered) / 4),
        group_confidences=confidences,
    )


def build_prompt(ctx: HierarchicalContext) -> str:
    return INSTRUCTION_BLOCK + "\n" + ctx.rendered + "\n" + OUTPUT_FORMAT_BLOCK


def mock_generate(ctx: HierarchicalContext) -> str:
    """Deterministic stand-in for a generation model.

    Emits the top technique of every group whose top confidence reaches the
    median of group top-confidences, in the declared output format. Always
    parseable, and never proposes anything outside the candidate set.
    """
    if not ctx.groups:
        return ""
    cutoff = statistics.median(ctx.group_confidences)
    lines = []
    for (tactic_id, _, techs), confidence in zip(ctx.groups, ctx.group_confidences):
        if confidence >= cutoff and techs:
            lines.append(f"- Tactic: {tactic_id or FALLBACK_LABEL}")
            lines.append(f"  - Techniques: {techs[0][0]}")
    return "\n".join(lines) + "\n"


class MockGenerationBackend:
    """In-process backend; zero network calls, fully deterministic."""

    name = "mock"

    def complete(self, prompt: str, ctx: HierarchicalContext) -> str:
        return mock_generate(ctx)


class RemoteGenerationBackend:
    """Chat-completions-style HTTP backend; model identity is configuration."""

    name = "remote"

    def __init__(self, endpoint: str, model: str, timeout_s: float = 30.0,
                 session: requests.Session | None = None) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.timeout_s = timeout_s
        self._session = session or requests.Session()

    def complete(self, prompt: str, ctx: HierarchicalContext) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        try:
            response = self._session.post(self.endpoint, json=payload, timeout=self.timeout_s)
        except requests.Timeout as exc:
            raise BackendTimeout(f"generation request timed out after {self.timeout_s}s") from exc
        except requests.RequestException as exc:
            raise BackendUnavailable(f"generation endpoint unreachable: {exc}") from exc
        if response.status_code != 200:
            raise BackendUnavailable(
                f"generation endpoint returned HTTP {response.status_code}")
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"malformed generation response: {exc}") from exc


def parse_output(raw: str, candidates: CandidateSet, h: Hierarchy) -> AnnotationResult:
    """Extract technique ids from the reply and enforce hierarchy constraints.

    Ids are read from "Techniques:"-labeled lines first; if none match, the
    whole text is scanned. A prediction is dropped when the technique is
    unknown, outside the candidate set, or (for hierarchical candidate sets
    only) its parent tactic was never retrieved.
    """
    ids: list[str] = []
    for line in raw.splitlines():
        if _TECH_LINE.search(line):
            ids.extend(TECHNIQUE_ID_SCAN.findall(line))
    if not ids:
        ids = TECHNIQUE_ID_SCAN.findall(raw)
    seen: set[str] = set()
    ordered = [tid for tid in ids if not (tid in seen or seen.add(tid))]
    if not ordered:
        raise UnparseableOutput("no technique id found in generation output")

    candidate_ids = set(candidates.technique_ids())
    retrieved = candidates.candidate_tactic_ids()
    dropped: list[tuple[str, str]] = []
    grouped: dict[str, list[str]] = {}
    for tid in ordered:
        if not h.has_technique(tid):
            dropped.append((tid, "unknown technique"))
        elif tid not in candidate_ids:
            dropped.append((tid, "outside candidate set"))
        elif not candidates.flat and h.parent_of(tid) not in retrieved:
            dropped.append((tid, "parent tactic not retrieved"))
        else:
            grouped.setdefault(h.parent_of(tid), []).append(tid)

    trace = AnnotationTrace(
        tactic_candidates=list(candidates.tactic_candidates),
        technique_candidates=[c.to_json_dict() for c in candidates.technique_candidates],
        fallback=candidates.flat,
        raw_text=raw,
        api_calls=0,
        latency_ms=0,
        raw_predictions=ordered,
    )
    return AnnotationResult(
        query_id=candidates.query_id,
        predictions=list(grouped.items()),
        dropped=dropped,
        trace=trace,
    )


def generate(prompt: str, ctx: HierarchicalContext, backend: GenerationBackend,
             candidates: CandidateSet, h: Hierarchy) -> AnnotationResult:
    """Run one annotate call against a backend within a two-request budget.

    The single spare request covers either a transport failure (same prompt)
    or an unparseable reply (prompt with a format reminder appended); whichever
    happens first consumes it. Errors surface once the budget is spent.
    """
    calls = 0

    def attempt(text: str) -> str:
        nonlocal calls
        calls += 1
        return backend.complete(text, ctx)

    try:
        raw = attempt(prompt)
    except (BackendUnavailable, BackendTimeout):
        raw = attempt(prompt)

    try:
        result = parse_output(raw, candidates, h)
    except UnparseableOutput:
        if calls >= 2:
            raise
        raw = attempt(prompt + RETRY_SUFFIX)
        result = parse_output(raw, candidates, h)

    result.trace.raw_text = raw
    result.trace.api_calls = calls
    return result
