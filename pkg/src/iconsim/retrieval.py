"""Exact nearest-neighbour retrieval over an embedding store.

The index is a brute-force scan: every query computes the metric against
all rows and sorts. That is the reference backend; anything faster must
reproduce its answers exactly. Ties in distance are broken by app_id so
results are stable across runs and platforms.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Corpus
from .embeddings import EmbeddingStore, IconEmbedding
from .errors import KneeInputError, StoreError, UnsupportedNormalizationError
from .metrics import MetricConfig, distances_to_all, normalize_distance


@dataclass(frozen=True)
class QueryFilter:
    """Candidate constraints applied before ranking."""

    exclude_developer: str | None = None
    require_category: str | None = None
    exclude_self: bool = False


@dataclass(frozen=True)
class RetrievalResult:
    app_id: str
    raw_distance: float
    normalized_distance: float | None
    rank: int


@dataclass
class Index:
    """Immutable metric-bound view of one embedding store plus app metadata."""

    store: EmbeddingStore
    metric: MetricConfig
    developers: tuple[str, ...]
    categories: tuple[str, ...]
    _content: np.ndarray = field(repr=False, default=None)
    _style: np.ndarray = field(repr=False, default=None)
    _ids: np.ndarray = field(repr=False, default=None)

    def __post_init__(self) -> None:
        self._content = np.asarray(self.store.content, dtype=np.float64)
        self._style = np.asarray(self.store.style, dtype=np.float64)
        self._ids = np.asarray(self.store.app_ids)

    def __len__(self) -> int:
        return len(self.store)

    def embedding_of(self, app_id: str) -> IconEmbedding:
        row = self.store.row_of(app_id)
        return IconEmbedding(
            app_id=app_id, content=self._content[row], style=self._style[row]
        )


def build_index(store: EmbeddingStore, corpus: Corpus, metric: MetricConfig) -> Index:
    """Pair a store with corpus metadata, checking they describe the same rows."""
    if len(store) != len(corpus):
        raise StoreError(
            f"store has {len(store)} rows but corpus has {len(corpus)} records"
        )
    for i, record in enumerate(corpus):
        if store.app_ids[i] != record.app_id:
            raise StoreError(
                f"row {i} mismatch: store has {store.app_ids[i]!r}, "
                f"corpus has {record.app_id!r}"
            )
    return Index(
        store=store,
        metric=metric,
        developers=tuple(r.developer for r in corpus),
        categories=tuple(r.category for r in corpus),
    )


def query_top_k(
    index: Index,
    target: IconEmbedding,
    k: int,
    query_filter: QueryFilter = QueryFilter(),
    max_normalized_distance: float | None = None,
) -> list[RetrievalResult]:
    """The k nearest candidates passing the filter, ascending by distance.

    With a max_normalized_distance the sorted result list is truncated at
    the threshold, so fewer than k rows may come back. Thresholds only make
    sense for cosine metrics; L2 has no finite scale to normalize by.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    is_cosine = index.metric.norm == "cos"
    if max_normalized_distance is not None and not is_cosine:
        raise UnsupportedNormalizationError(
            f"distance threshold requires a cosine metric, not {index.metric.label}"
        )
    dists = distances_to_all(
        target.content, target.style, index._content, index._style, index.metric
    )
    mask = np.ones(len(index), dtype=bool)
    if query_filter.exclude_developer is not None:
        mask &= np.asarray(index.developers) != query_filter.exclude_developer
    if query_filter.require_category is not None:
        mask &= np.asarray(index.categories) == query_filter.require_category
    if query_filter.exclude_self:
        mask &= index._ids != target.app_id
    candidates = np.nonzero(mask)[0]
    if candidates.size == 0:
        return []
    sub_d = dists[candidates]
    sub_ids = index._ids[candidates]
    order = np.lexsort((sub_ids, sub_d))[:k]
    results = []
    for rank, pos in enumerate(order, start=1):
        raw = float(sub_d[pos])
        norm = normalize_distance(raw, index.metric) if is_cosine else None
        if max_normalized_distance is not None and norm > max_normalized_distance:
            break
        results.append(
            RetrievalResult(
                app_id=str(sub_ids[pos]),
                raw_distance=raw,
                normalized_distance=norm,
                rank=rank,
            )
        )
    return results


def knee_threshold(curve: Sequence[tuple[float, float]]) -> float | None:
    """Knee of a rising threshold/rate curve, or None when there is no knee.

    Both axes are min-max normalized to [0,1]; the knee sits at the maximum
    of y(x) − x. A curve at or below the diagonal (including flat rates)
    has no knee. The first maximum wins when several samples tie.
    """
    if len(curve) < 3:
        raise KneeInputError(f"need at least 3 points, got {len(curve)}")
    x = np.asarray([p[0] for p in curve], dtype=np.float64)
    y = np.asarray([p[1] for p in curve], dtype=np.float64)
    if not np.all(np.diff(x) > 0):
        raise KneeInputError("thresholds must be strictly increasing")
    if np.any(np.diff(y) < 0):
        raise KneeInputError("rates must be non-decreasing")
    if y[-1] == y[0]:
        return None
    xn = (x - x[0]) / (x[-1] - x[0])
    yn = (y - y[0]) / (y[-1] - y[0])
    diff = yn - xn
    best = int(np.argmax(diff))
    if diff[best] <= 0.0:
        return None
    return float(x[best])


def max_normalized_grid(step: float = 0.01) -> np.ndarray:
    """Evenly spaced thresholds 0..1 inclusive with the given step."""
    if not 0.0 < step <= 1.0:
        raise ValueError(f"step must be in (0, 1], got {step}")
    return np.linspace(0.0, 1.0, round(1.0 / step) + 1)
