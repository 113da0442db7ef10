"""Exact top-k cosine search over tactic/technique embedding matrices.

Deliberately exact: at a few hundred rows a full scan beats any approximate
structure and keeps retrieval results reproducible. The optional partition
map (tactic id -> rows) is what prunes the technique search to candidate
tactics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import AbstractSet, Mapping, Sequence

import numpy as np

from .embedder import Embedding
from .errors import DimensionMismatch, DuplicateId, NotPartitioned, PartitionError


@dataclass
class VectorIndex:
    ids: list[str]
    matrix: np.ndarray  # |ids| x d, float64, unit-norm rows
    partition: dict[str, list[int]] | None = None

    def __post_init__(self) -> None:
        self._row_of = {id_: i for i, id_ in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dimension(self) -> int:
        return int(self.matrix.shape[1])

    def row_of(self, id_: str) -> int:
        return self._row_of[id_]

    def vector(self, id_: str) -> np.ndarray:
        return self.matrix[self._row_of[id_]]

    def parent_of_row(self) -> dict[str, str]:
        """Reverse the partition: indexed id -> partition key."""
        if self.partition is None:
            return {}
        return {self.ids[row]: key for key, rows in self.partition.items() for row in rows}


def build_index(embeddings: Sequence[Embedding],
                partition: Mapping[str, Sequence[str]] | None = None) -> VectorIndex:
    """Stack embeddings into an index, optionally validating a partition map.

    The partition maps a key (tactic id) to the ids it owns; cells must be
    disjoint and cover every indexed id.
    """
    if not embeddings:
        raise ValueError("cannot build an index from zero embeddings")

    dimension = embeddings[0].dimension
    ids: list[str] = []
    rows = np.empty((len(embeddings), dimension), dtype=np.float64)
    seen: set[str] = set()
    for i, emb in enumerate(embeddings):
        if emb.dimension != dimension:
            raise DimensionMismatch(
                f"embedding {emb.id!r} has dimension {emb.dimension}, expected {dimension}")
        if emb.id in seen:
            raise DuplicateId(f"duplicate embedding id {emb.id!r}")
        seen.add(emb.id)
        ids.append(emb.id)
        rows[i] = emb.vector

    cells: dict[str, list[int]] | None = None
    if partition is not None:
        row_of = {id_: i for i, id_ in enumerate(ids)}
        cells = {}
        claimed: dict[str, str] = {}
        for key, members in partition.items():
            cell = []
            for member in members:
                if member not in row_of:
                    raise PartitionError(f"partition cell {key!r} references unknown id {member!r}")
                if member in claimed:
                    raise PartitionError(
                        f"id {member!r} appears in both {claimed[member]!r} and {key!r}")
                claimed[member] = key
                cell.append(row_of[member])
            cells[key] = cell
        missing = seen - set(claimed)
        if missing:
            raise PartitionError(f"partition does not cover ids: {sorted(missing)}")

    return VectorIndex(ids=ids, matrix=rows, partition=cells)


def topk_cosine(index: VectorIndex, query: Embedding, k: int,
                restrict: AbstractSet[str] | None = None) -> list[tuple[str, float]]:
    """Exact top-k by dot product (cosine, given unit norms), descending.

    Ties break by ascending id so repeated queries return identical orderings.
    ``restrict`` limits the scan to the union of the named partition cells;
    keys without a cell contribute no rows.
    """
    if query.dimension != index.dimension:
        raise DimensionMismatch(
            f"query dimension {query.dimension} != index dimension {index.dimension}")
    if k < 1:
        raise ValueError("k must be >= 1")

    if restrict is None:
        row_ids = index.ids
        scores = index.matrix @ query.vector
    else:
        if index.partition is None:
            raise NotPartitioned("restricted query on an unpartitioned index")
        rows: list[int] = []
        for key in sorted(restrict):
            rows.extend(index.partition.get(key, ()))
        if not rows:
            return []
        row_ids = [index.ids[r] for r in rows]
        scores = index.matrix[rows] @ query.vector

    order = np.lexsort((np.asarray(row_ids), -scores))
    return [(row_ids[i], float(scores[i])) for i in order[:k]]


def save_index(index: VectorIndex, path: str | Path) -> None:
    payload = {
        "dimension": index.dimension,
        "ids": index.ids,
        "vectors": index.matrix.tolist(),
        "partition": None if index.partition is None else {
            key: [index.ids[row] for row in rows]
            for key, rows in index.partition.items()
        },
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_index(path: str | Path) -> VectorIndex:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    matrix = np.asarray(data["vectors"], dtype=np.float64)
    ids = list(data["ids"])
    if matrix.shape != (len(ids), int(data["dimension"])):
        raise DimensionMismatch(
            f"index file {path}: matrix shape {matrix.shape} does not match "
            f"{len(ids)} ids x dimension {data['dimension']}")
    embeddings = [Embedding(id=i, vector=row) for i, row in zip(ids, matrix)]
    return build_index(embeddings, partition=data.get("partition"))
