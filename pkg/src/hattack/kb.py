"""Tactic-technique taxonomy: parsing, validation, text cards, co-occurrence prior.

The knowledge base is a two-level hierarchy: every technique belongs to exactly
one tactic, the tactic's child list is the exact inverse of the per-technique
parent field, and the union of all child lists is the full technique set.
Multi-tactic techniques from upstream data must be ingested as separate
per-tactic entries (see the KB format notes in the README).
"""

from __future__ import annotations

import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ParseError, UnknownTechnique, ValidationError

TACTIC_ID_PATTERN = re.compile(r"^TA\d{4}$")
TECHNIQUE_ID_PATTERN = re.compile(r"^T\d{4}(?:\.\d{3})?$")

# Loose form used to pull technique ids out of free text (generation output).
TECHNIQUE_ID_SCAN = re.compile(r"\bT\d{4}(?:\.\d{3})?\b")


@dataclass(frozen=True)
class Tactic:
    id: str
    name: str
    description: str
    keywords: tuple[str, ...] = ()
    behaviors: tuple[str, ...] = ()


@dataclass(frozen=True)
class Technique:
    id: str
    name: str
    tactic: str
    description: str
    examples: tuple[str, ...] = ()
    detection: tuple[str, ...] = ()


@dataclass
class Hierarchy:
    """Ordered tactic and technique collections plus the tactic->children map.

    The child index is derived from the per-technique parent field at build
    time; ``validate_hierarchy`` re-checks the derivation so that hierarchies
    assembled by hand (e.g. in tests) can be audited.
    """

    tactics: list[Tactic]
    techniques: list[Technique]
    child_index: dict[str, list[str]]
    _tactic_by_id: dict[str, Tactic] = field(repr=False, default_factory=dict)
    _technique_by_id: dict[str, Technique] = field(repr=False, default_factory=dict)

    def __post_init__(self) -> None:
        self._tactic_by_id = {t.id: t for t in self.tactics}
        self._technique_by_id = {t.id: t for t in self.techniques}

    @classmethod
    def build(cls, tactics: Sequence[Tactic], techniques: Sequence[Technique]) -> "Hierarchy":
        """Construct with the child index derived from technique parents, in input order."""
        children: dict[str, list[str]] = {t.id: [] for t in tactics}
        for tech in techniques:
            children.setdefault(tech.tactic, []).append(tech.id)
        return cls(list(tactics), list(techniques), children)

    def tactic(self, tactic_id: str) -> Tactic:
        return self._tactic_by_id[tactic_id]

    def technique(self, technique_id: str) -> Technique:
        return self._technique_by_id[technique_id]

    def has_technique(self, technique_id: str) -> bool:
        return technique_id in self._technique_by_id

    def has_tactic(self, tactic_id: str) -> bool:
        return tactic_id in self._tactic_by_id

    def parent_of(self, technique_id: str) -> str:
        """Technique -> tactic mapping."""
        return self._technique_by_id[technique_id].tactic

    def children_of(self, tactic_id: str) -> list[str]:
        """Tactic -> technique-set mapping (empty list for childless tactics)."""
        return list(self.child_index.get(tactic_id, []))


@dataclass(frozen=True)
class LabeledExample:
    id: str
    text: str
    techniques: tuple[str, ...]


@dataclass
class CooccurrencePrior:
    """Tactic-conditional technique probabilities estimated from labeled data.

    For every tactic with at least one child the probabilities over its
    children sum to one: observed tactics use empirical frequencies, unseen
    tactics fall back to the uniform distribution. Pairs whose technique does
    not belong to the tactic always have probability zero.
    """

    table: dict[tuple[str, str], float]
    counts: dict[tuple[str, str], int]

    def prob(self, tactic_id: str, technique_id: str) -> float:
        return self.table.get((tactic_id, technique_id), 0.0)

    def count(self, tactic_id: str, technique_id: str) -> int:
        return self.counts.get((tactic_id, technique_id), 0)

    def to_json_dict(self) -> dict:
        probs: dict[str, dict[str, float]] = defaultdict(dict)
        counts: dict[str, dict[str, int]] = defaultdict(dict)
        for (tac, tech), p in self.table.items():
            probs[tac][tech] = p
        for (tac, tech), c in self.counts.items():
            counts[tac][tech] = c
        return {"probabilities": dict(probs), "counts": dict(counts)}

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "CooccurrencePrior":
        table = {
            (tac, tech): float(p)
            for tac, inner in data["probabilities"].items()
            for tech, p in inner.items()
        }
        counts = {
            (tac, tech): int(c)
            for tac, inner in data.get("counts", {}).items()
            for tech, c in inner.items()
        }
        return cls(table=table, counts=counts)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ParseError(message)


def _str_list(raw: object, where: str) -> tuple[str, ...]:
    _require(isinstance(raw, list) and all(isinstance(s, str) for s in raw),
             f"{where} must be a list of strings")
    return tuple(raw)  # type: ignore[arg-type]


def hierarchy_from_dict(data: Mapping) -> Hierarchy:
    """Build and validate a hierarchy from the already-decoded KB JSON object."""
    _require(isinstance(data, Mapping), "KB root must be a JSON object")
    _require("tactics" in data and "techniques" in data,
             "KB root must contain 'tactics' and 'techniques'")

    tactics: list[Tactic] = []
    for i, raw in enumerate(data["tactics"]):
        _require(isinstance(raw, Mapping), f"tactics[{i}] must be an object")
        for key in ("id", "name", "description"):
            _require(isinstance(raw.get(key), str), f"tactics[{i}].{key} must be a string")
        tactics.append(Tactic(
            id=raw["id"],
            name=raw["name"],
            description=raw["description"],
            keywords=_str_list(raw.get("keywords", []), f"tactics[{i}].keywords"),
            behaviors=_str_list(raw.get("behaviors", []), f"tactics[{i}].behaviors"),
        ))

    techniques: list[Technique] = []
    for i, raw in enumerate(data["techniques"]):
        _require(isinstance(raw, Mapping), f"techniques[{i}] must be an object")
        for key in ("id", "name", "tactic", "description"):
            _require(isinstance(raw.get(key), str), f"techniques[{i}].{key} must be a string")
        techniques.append(Technique(
            id=raw["id"],
            name=raw["name"],
            tactic=raw["tactic"],
            description=raw["description"],
            examples=_str_list(raw.get("examples", []), f"techniques[{i}].examples"),
            detection=_str_list(raw.get("detection", []), f"techniques[{i}].detection"),
        ))

    _validate_entries(tactics, techniques)
    return Hierarchy.build(tactics, techniques)


def _validate_entries(tactics: Sequence[Tactic], techniques: Sequence[Technique]) -> None:
    tactic_ids = set()
    for tac in tactics:
        if not TACTIC_ID_PATTERN.match(tac.id):
            raise ValidationError(f"tactic id {tac.id!r} does not match TA####")
        if tac.id in tactic_ids:
            raise ValidationError(f"duplicate tactic id {tac.id}")
        tactic_ids.add(tac.id)
        if not tac.description:
            raise ValidationError(f"tactic {tac.id} has an empty description")

    technique_ids = set()
    for tech in techniques:
        if not TECHNIQUE_ID_PATTERN.match(tech.id):
            raise ValidationError(f"technique id {tech.id!r} does not match T####(.###)")
        if tech.id in technique_ids:
            raise ValidationError(f"duplicate technique id {tech.id}")
        technique_ids.add(tech.id)
        if tech.tactic not in tactic_ids:
            raise ValidationError(
                f"technique {tech.id} references undeclared tactic {tech.tactic!r}")
        if not tech.description:
            raise ValidationError(f"technique {tech.id} has an empty description")


def load_hierarchy(path: str | Path) -> Hierarchy:
    """Load a KB JSON file, raising ParseError / ValidationError on bad input.

    File-read failures propagate as OSError so callers can distinguish an
    environment problem from malformed data.
    """
    raw = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"KB file {path} is not valid JSON: {exc}") from exc
    return hierarchy_from_dict(data)


def hierarchy_to_dict(h: Hierarchy) -> dict:
    return {
        "tactics": [
            {"id": t.id, "name": t.name, "description": t.description,
             "keywords": list(t.keywords), "behaviors": list(t.behaviors)}
            for t in h.tactics
        ],
        "techniques": [
            {"id": t.id, "name": t.name, "tactic": t.tactic, "description": t.description,
             "examples": list(t.examples), "detection": list(t.detection)}
            for t in h.techniques
        ],
    }


def validate_hierarchy(h: Hierarchy) -> list[str]:
    """Return violation descriptions; empty list means the hierarchy is consistent.

    Checks completeness (every technique appears in some child list),
    disjointness (no technique claimed by two tactics) and that the child
    index is exactly the inverse of the per-technique parent field.
    """
    violations: list[str] = []

    declared = {t.id for t in h.techniques}
    seen: dict[str, str] = {}
    for tactic_id, children in h.child_index.items():
        for tech_id in children:
            if tech_id in seen and seen[tech_id] != tactic_id:
                violations.append(
                    f"disjointness: technique {tech_id} listed under both "
                    f"{seen[tech_id]} and {tactic_id}")
            seen.setdefault(tech_id, tactic_id)
            if tech_id not in declared:
                violations.append(
                    f"inversion: child index of {tactic_id} references "
                    f"undeclared technique {tech_id}")

    for tech in h.techniques:
        if tech.id not in seen:
            violations.append(f"completeness: technique {tech.id} missing from every child list")
        elif seen[tech.id] != tech.tactic:
            violations.append(
                f"inversion: technique {tech.id} declares tactic {tech.tactic} "
                f"but is indexed under {seen[tech.id]}")

    return violations


def compose_tactic_text(tactic: Tactic) -> str:
    """Concatenate description, keywords and behaviors with single spaces."""
    segments = [tactic.description, " ".join(tactic.keywords), " ".join(tactic.behaviors)]
    return " ".join(s for s in segments if s)


def compose_technique_text(technique: Technique) -> str:
    """Concatenate description, examples and detection notes with single spaces."""
    segments = [technique.description, " ".join(technique.examples), " ".join(technique.detection)]
    return " ".join(s for s in segments if s)


def load_corpus(path: str | Path) -> list[LabeledExample]:
    """Read a labeled JSONL corpus: one {id, text, techniques} object per line."""
    examples: list[LabeledExample] = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict) or "text" not in obj:
            raise ParseError(f"{path}:{lineno}: expected an object with a 'text' field")
        examples.append(LabeledExample(
            id=str(obj.get("id", f"line-{lineno}")),
            text=str(obj["text"]),
            techniques=tuple(str(t) for t in obj.get("techniques", [])),
        ))
    return examples


def estimate_cooccurrence(h: Hierarchy, corpus: Iterable[LabeledExample]) -> CooccurrencePrior:
    """Estimate P(technique | tactic) from labeled annotations.

    Each annotation of technique T increments count(T, parent(T)). Tactics
    with no observed annotations get the uniform distribution over their
    children so downstream joint scoring stays well defined.
    """
    counts: dict[tuple[str, str], int] = {}
    for tactic_id, children in h.child_index.items():
        for tech_id in children:
            counts[(tactic_id, tech_id)] = 0

    for example in corpus:
        for tech_id in example.techniques:
            if not h.has_technique(tech_id):
                raise UnknownTechnique(
                    f"example {example.id}: technique {tech_id} not in hierarchy")
            counts[(h.parent_of(tech_id), tech_id)] += 1

    table: dict[tuple[str, str], float] = {}
    for tactic_id, children in h.child_index.items():
        total = sum(counts[(tactic_id, tech_id)] for tech_id in children)
        for tech_id in children:
            if total > 0:
                table[(tactic_id, tech_id)] = counts[(tactic_id, tech_id)] / total
            elif children:
                table[(tactic_id, tech_id)] = 1.0 / len(children)

    return CooccurrencePrior(table=table, counts=counts)
