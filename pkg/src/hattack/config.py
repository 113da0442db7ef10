"""Single-file configuration for every command.

All hyperparameters live in one YAML document with sections mirroring the
modules that consume them. Any leaf can be overridden on the command line with
``--set section.key=value``; values are parsed with YAML semantics so numbers
and booleans come through typed. Unknown sections or keys are rejected rather
than ignored.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .embedder import EmbedderConfig
from .errors import ValidationError
from .reranker import LossWeights
from .retrieval import RetrievalParams

ABLATION_FLAGS = ("no_hierarchy", "no_rerank", "no_prior", "no_fallback", "no_hier_context")


@dataclass(frozen=True)
class AblationFlags:
    no_hierarchy: bool = False
    no_rerank: bool = False
    no_prior: bool = False
    no_fallback: bool = False
    no_hier_context: bool = False

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "AblationFlags":
        unknown = [n for n in names if n not in ABLATION_FLAGS]
        if unknown:
            raise ValidationError(
                f"unknown ablation flags {unknown}; known: {list(ABLATION_FLAGS)}")
        return cls(**{n: True for n in names})

    def active(self) -> list[str]:
        return [n for n in ABLATION_FLAGS if getattr(self, n)]


@dataclass(frozen=True)
class RerankerSettings:
    hidden: int = 64
    seed: int = 42
    lr: float = 1e-4
    batch: int = 32
    patience: int = 5
    max_epochs: int = 200

    def __post_init__(self) -> None:
        if self.hidden < 1 or self.batch < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValidationError("reranker hidden/batch/patience/max_epochs must be positive")
        if self.lr < 0:
            raise ValidationError("reranker lr must be non-negative")


@dataclass(frozen=True)
class GenerationSettings:
    backend: str = "mock"
    endpoint: str = ""
    model: str = ""
    timeout_s: float = 30.0
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        if self.backend not in ("mock", "remote"):
            raise ValidationError(f"generation backend must be mock or remote, got {self.backend!r}")
        if self.backend == "remote" and not self.endpoint:
            raise ValidationError("remote generation backend requires an endpoint")


@dataclass(frozen=True)
class EvalSettings:
    workers: int = 1
    ablation: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ValidationError("eval workers must be positive")
        AblationFlags.from_names(self.ablation)

    def flags(self) -> AblationFlags:
        return AblationFlags.from_names(self.ablation)


@dataclass(frozen=True)
class Config:
    workdir: str = "."
    kb_path: str = ""
    corpus_train: str = ""
    corpus_val: str = ""
    corpus_test: str = ""
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    params: RetrievalParams = field(default_factory=RetrievalParams)
    weights: LossWeights = field(default_factory=LossWeights)
    reranker: RerankerSettings = field(default_factory=RerankerSettings)
    generation: GenerationSettings = field(default_factory=GenerationSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)


def default_config_dict() -> dict:
    return {
        "workdir": ".",
        "kb_path": "",
        "corpus": {"train": "", "val": "", "test": ""},
        "embedder": {"backend": "hash", "dimension": 384, "source": "",
                     "timeout_s": 30.0, "max_in_flight": 4},
        "retrieval": {"M": 3, "K_A": 15, "alpha": 0.7, "beta": 0.3,
                      "theta": 0.3, "flat_k": 45},
        "loss": {"lambda1": 1.0, "lambda2": 1.0, "lambda3": 1.0},
        "reranker": {"hidden": 64, "seed": 42, "lr": 1e-4, "batch": 32,
                     "patience": 5, "max_epochs": 200},
        "generation": {"backend": "mock", "endpoint": "", "model": "",
                       "timeout_s": 30.0, "max_in_flight": 4},
        "eval": {"workers": 1, "ablation": []},
    }


def _merge(base: dict, override: Mapping, path: str = "") -> dict:
    """Deep-merge ``override`` into ``base``; reject keys absent from the defaults."""
    for key, value in override.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ValidationError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ValidationError(f"config key {where} must be a section")
            _merge(base[key], value, where)
        else:
            base[key] = value
    return base


def apply_overrides(tree: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` strings; values parsed with YAML typing."""
    for item in overrides:
        key, sep, raw_value = item.partition("=")
        if not sep or not key:
            raise ValidationError(f"override must look like section.key=value, got {item!r}")
        value = yaml.safe_load(raw_value) if raw_value != "" else ""
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ValidationError(f"unknown config section in override: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ValidationError(f"unknown config key in override: {key}")
        if isinstance(node[parts[-1]], dict):
            raise ValidationError(f"override target is a section, not a leaf: {key}")
        node[parts[-1]] = value
    return tree


def config_from_dict(tree: Mapping) -> Config:
    merged = _merge(default_config_dict(), tree)
    try:
        return Config(
            workdir=str(merged["workdir"]),
            kb_path=str(merged["kb_path"]),
            corpus_train=str(merged["corpus"]["train"]),
            corpus_val=str(merged["corpus"]["val"]),
            corpus_test=str(merged["corpus"]["test"]),
            embedder=EmbedderConfig(**merged["embedder"]),
            params=RetrievalParams(**merged["retrieval"]),
            weights=LossWeights(**merged["loss"]),
            reranker=RerankerSettings(**merged["reranker"]),
            generation=GenerationSettings(**merged["generation"]),
            eval=EvalSettings(workers=merged["eval"]["workers"],
                              ablation=tuple(merged["eval"]["ablation"])),
        )
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid configuration: {exc}") from exc


def load_config(path: str | Path, overrides: Sequence[str] = ()) -> Config:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    loaded = yaml.safe_load(raw) or {}
    if not isinstance(loaded, Mapping):
        raise ValidationError(f"config root must be a mapping, got {type(loaded).__name__}")
    tree = _merge(default_config_dict(), loaded)
    apply_overrides(tree, overrides)
    return config_from_dict(tree)


def resolved_dict(config: Config) -> dict:
    """Round-trip the dataclass tree back into the section layout."""
    return {
        "workdir": config.workdir,
        "kb_path": config.kb_path,
        "corpus": {"train": config.corpus_train, "val": config.corpus_val,
                   "test": config.corpus_test},
        "embedder": {"backend": config.embedder.backend,
                     "dimension": config.embedder.dimension,
                     "source": config.embedder.source,
                     "timeout_s": config.embedder.timeout_s,
                     "max_in_flight": config.embedder.max_in_flight},
        "retrieval": {"M": config.params.M, "K_A": config.params.K_A,
                      "alpha": config.params.alpha, "beta": config.params.beta,
                      "theta": config.params.theta, "flat_k": config.params.flat_k},
        "loss": {"lambda1": config.weights.lambda1, "lambda2": config.weights.lambda2,
                 "lambda3": config.weights.lambda3},
        "reranker": {"hidden": config.reranker.hidden, "seed": config.reranker.seed,
                     "lr": config.reranker.lr, "batch": config.reranker.batch,
                     "patience": config.reranker.patience,
                     "max_epochs": config.reranker.max_epochs},
        "generation": {"backend": config.generation.backend,
                       "endpoint": config.generation.endpoint,
                       "model": config.generation.model,
                       "timeout_s": config.generation.timeout_s,
                       "max_in_flight": config.generation.max_in_flight},
        "eval": {"workers": config.eval.workers, "ablation": list(config.eval.ablation)},
    }


def config_fingerprint(config: Config, flags: AblationFlags) -> str:
    """Stable id for a resolved configuration plus the active ablation flags."""
    tree = resolved_dict(config)
    digest = hashlib.sha256(json.dumps(tree, sort_keys=True).encode("utf-8")).hexdigest()[:12]
    active = flags.active()
    return f"cfg={digest} flags={','.join(active) if active else 'none'}"


def write_default_config(path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(default_config_dict(), sort_keys=False),
                          encoding="utf-8")
