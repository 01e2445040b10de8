"""Exact flat L2 nearest-neighbour search, one index per catalog source."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from impress.catalog import CatalogSource, CatalogStore
from impress.gateway import DimensionMismatch


class EmptyIndex(ValueError):
    pass


@dataclass(frozen=True)
class SearchHit:
    spc_id: str
    chunk_id: str
    distance: float
    source: CatalogSource


def l2_distance(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    return float(np.sqrt(np.sum((a - b) ** 2)))


class FlatL2Index:
    """Brute-force Euclidean index over raw (unnormalized) vectors.

    Distances are computed in float64 from the stored rows. Results are
    ordered by distance, with ties broken by ``(spc_id, chunk_id)``.
    """

    def __init__(
        self,
        source: CatalogSource,
        rows: np.ndarray,
        row_meta: Sequence[tuple[str, str]],
        embed_model_id: str = "",
        dimension: int | None = None,
    ):
        rows = np.asarray(rows)
        if rows.size == 0:
            if dimension is None:
                raise ValueError("dimension is required for an empty index")
            rows = np.zeros((0, dimension), dtype=np.float32)
        if rows.ndim != 2:
            raise DimensionMismatch("rows must form a matrix")
        if dimension is not None and rows.shape[1] != dimension:
            raise DimensionMismatch(f"rows have dimension {rows.shape[1]}, expected {dimension}")
        if len(row_meta) != rows.shape[0]:
            raise ValueError(f"{rows.shape[0]} rows but {len(row_meta)} metadata entries")
        self.source = source
        self.embed_model_id = embed_model_id
        self.dimension = rows.shape[1]
        self._rows = rows.astype(np.float64)
        self._rows.flags.writeable = False
        self.row_meta = tuple((str(s), str(c)) for s, c in row_meta)
        # rank of each row under lexicographic (spc_id, chunk_id) order, for tie-breaks
        order = sorted(range(len(self.row_meta)), key=self.row_meta.__getitem__)
        self._tie_rank = np.empty(len(order), dtype=np.int64)
        self._tie_rank[order] = np.arange(len(order))

    @classmethod
    def from_store(cls, store: CatalogStore, source: CatalogSource) -> FlatL2Index:
        # a store without any vectors has dimension 0; its empty indexes get a placeholder width
        dimension = store.dimension or 1
        return cls(
            source,
            store.vectors.get(source, np.zeros((0, dimension), dtype=np.float32)),
            store.row_meta.get(source, ()),
            store.embed_model_id,
            dimension,
        )

    def __len__(self) -> int:
        return len(self.row_meta)

    @property
    def rows(self) -> np.ndarray:
        return self._rows

    def distances(self, query: Sequence[float]) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dimension,):
            raise DimensionMismatch(f"query has shape {q.shape}, index dimension is {self.dimension}")
        return np.sqrt(np.sum((self._rows - q) ** 2, axis=1))

    def search(self, query: Sequence[float], k: int) -> list[SearchHit]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if len(self) == 0:
            raise EmptyIndex(f"index for {self.source.value} has no rows")
        d = self.distances(query)
        n = len(d)
        if k < n:
            # everything at or below the k-th smallest distance, so boundary ties stay deterministic
            kth = np.partition(d, k - 1)[k - 1]
            pool = np.flatnonzero(d <= kth)
        else:
            pool = np.arange(n)
        order = pool[np.lexsort((self._tie_rank[pool], d[pool]))][:k]
        return [
            SearchHit(self.row_meta[i][0], self.row_meta[i][1], float(d[i]), self.source) for i in order
        ]


def search_top_k(index: FlatL2Index, query: Sequence[float], k: int) -> list[SearchHit]:
    return index.search(query, k)


def build_indexes(store: CatalogStore, sources: Sequence[CatalogSource] | None = None) -> dict[CatalogSource, FlatL2Index]:
    sources = store.sources if sources is None else sources
    return {s: FlatL2Index.from_store(store, s) for s in sources}
