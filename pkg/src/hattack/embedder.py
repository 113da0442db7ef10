"""Text-to-vector backends producing unit-norm embeddings of fixed dimension.

Three interchangeable backends:

* ``hash``   - deterministic feature hashing, no model dependency; the default
               for tests and fixtures.
* ``file``   - precomputed vectors loaded from JSONL, keyed by exact text or
               by a caller-supplied id.
* ``remote`` - HTTP embedding service speaking POST /embed.

All backends normalize, so downstream cosine similarity reduces to a dot
product.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import requests

from .errors import DimensionMismatch, EmptyText, MissingVector, ServiceError

logger = logging.getLogger(__name__)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64_MASK = 0xFFFFFFFFFFFFFFFF


@dataclass(eq=False)
class Embedding:
    """A unit-norm float64 vector tagged with an id (defaults to the source text)."""

    id: str
    vector: np.ndarray

    @property
    def dimension(self) -> int:
        return int(self.vector.shape[0])

    def with_id(self, new_id: str) -> "Embedding":
        return Embedding(id=new_id, vector=self.vector)


@dataclass(frozen=True)
class EmbedderConfig:
    backend: str = "hash"
    dimension: int = 384
    source: str | None = None
    timeout_s: float = 30.0
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        if self.backend not in ("hash", "file", "remote"):
            raise ValueError(f"unknown embedder backend {self.backend!r}")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.backend in ("file", "remote") and not self.source:
            raise ValueError(f"{self.backend} backend requires a source")


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _U64_MASK
    return h


def _require_text(text: str) -> str:
    if not text or not text.strip():
        raise EmptyText("cannot embed empty text")
    return text


def _normalize(vector: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise ValueError("cannot normalize the zero vector")
    return vector / norm


class HashEmbedder:
    """Feature-hashing embedder: lowercase, split on Unicode whitespace,
    64-bit FNV-1a per token, bucket = hash mod d, sign from hash bit 63,
    then L2-normalize. Bitwise deterministic across processes and platforms.
    """

    def __init__(self, dimension: int = 384) -> None:
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension

    def embed(self, text: str, id: str | None = None) -> Embedding:
        _require_text(text)
        vector = np.zeros(self.dimension, dtype=np.float64)
        for token in text.lower().split():
            h = fnv1a64(token.encode("utf-8"))
            sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
            vector[h % self.dimension] += sign
        # Each token contributes +-1 to one bucket, so a zero vector can only
        # arise from exact cancellation across tokens; renormalize defensively.
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            vector[fnv1a64(text.lower().encode("utf-8")) % self.dimension] = 1.0
            norm = 1.0
        return Embedding(id=id if id is not None else text, vector=vector / norm)

    def embed_batch(self, texts: Sequence[str]) -> list[Embedding]:
        return [self.embed(t) for t in texts]


class FileEmbedder:
    """Serves precomputed vectors from a JSONL file of {"id": ..., "vector": [...]}.

    Lookup tries the exact input text first, then the caller-supplied id, so
    producers may key entries either way.
    """

    def __init__(self, path: str | Path, dimension: int) -> None:
        self.dimension = dimension
        self.path = str(path)
        self._vectors: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            vector = np.asarray(obj["vector"], dtype=np.float64)
            if vector.shape != (dimension,):
                raise DimensionMismatch(
                    f"{path}:{lineno}: vector has length {vector.shape[0]}, expected {dimension}")
            norm = float(np.linalg.norm(vector))
            if abs(norm - 1.0) > 1e-3:
                logger.warning("%s:%d: vector norm %.6f deviates from 1; renormalizing",
                               path, lineno, norm)
            self._vectors[str(obj["id"])] = _normalize(vector)

    def embed(self, text: str, id: str | None = None) -> Embedding:
        _require_text(text)
        vector = self._vectors.get(text)
        if vector is None and id is not None:
            vector = self._vectors.get(id)
        if vector is None:
            key = id if id is not None else text
            raise MissingVector(f"no precomputed vector for {key!r} in {self.path}")
        return Embedding(id=id if id is not None else text, vector=vector)

    def embed_batch(self, texts: Sequence[str]) -> list[Embedding]:
        return [self.embed(t) for t in texts]


class RemoteEmbedder:
    """Client for the POST /embed protocol; bounds concurrent requests."""

    def __init__(self, endpoint: str, dimension: int,
                 timeout_s: float = 30.0, max_in_flight: int = 4) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.dimension = dimension
        self.timeout_s = timeout_s
        self._slots = threading.Semaphore(max_in_flight)

    def _request(self, texts: Sequence[str]) -> list[np.ndarray]:
        with self._slots:
            try:
                response = requests.post(
                    f"{self.endpoint}/embed",
                    json={"texts": list(texts)},
                    timeout=self.timeout_s,
                    headers={"Content-Type": "application/json"},
                )
            except requests.RequestException as exc:
                raise ServiceError(f"embedding service at {self.endpoint} failed: {exc}") from exc
        if response.status_code // 100 != 2:
            raise ServiceError(
                f"embedding service at {self.endpoint} returned {response.status_code}")
        try:
            payload = response.json()
            reported = int(payload["dimension"])
            vectors = payload["vectors"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ServiceError(f"malformed embedding service response: {exc}") from exc
        if reported != self.dimension:
            raise ServiceError(
                f"dimension mismatch: service reports {reported}, configured {self.dimension}")
        if len(vectors) != len(texts):
            raise ServiceError(
                f"service returned {len(vectors)} vectors for {len(texts)} texts")
        out = []
        for vec in vectors:
            arr = np.asarray(vec, dtype=np.float64)
            if arr.shape != (self.dimension,):
                raise ServiceError(
                    f"dimension mismatch: vector of length {arr.shape[0]}, "
                    f"configured {self.dimension}")
            out.append(_normalize(arr))
        return out

    def embed(self, text: str, id: str | None = None) -> Embedding:
        _require_text(text)
        vector = self._request([text])[0]
        return Embedding(id=id if id is not None else text, vector=vector)

    def embed_batch(self, texts: Sequence[str]) -> list[Embedding]:
        # One request for the whole batch: it either fully succeeds or raises.
        for t in texts:
            _require_text(t)
        if not texts:
            return []
        vectors = self._request(texts)
        return [Embedding(id=t, vector=v) for t, v in zip(texts, vectors)]


Embedder = HashEmbedder | FileEmbedder | RemoteEmbedder


def make_embedder(config: EmbedderConfig) -> Embedder:
    if config.backend == "hash":
        return HashEmbedder(dimension=config.dimension)
    if config.backend == "file":
        return FileEmbedder(path=config.source or "", dimension=config.dimension)
    return RemoteEmbedder(
        endpoint=config.source or "",
        dimension=config.dimension,
        timeout_s=config.timeout_s,
        max_in_flight=config.max_in_flight,
    )


def write_vectors_jsonl(path: str | Path, embeddings: Sequence[Embedding]) -> None:
    """Persist embeddings in the precomputed-vector JSONL format."""
    with open(path, "w", encoding="utf-8") as fh:
        for emb in embeddings:
            fh.write(json.dumps({"id": emb.id, "vector": emb.vector.tolist()}) + "\n")
