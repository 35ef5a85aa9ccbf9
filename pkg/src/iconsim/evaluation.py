"""Retrieval-rate evaluation over labelled groups and counterfeit reports.

An image counts as retrieved at top-k when it appears in the top-k
neighbour list of at least one other member of its labelled group, with
the query excluding only the query image itself. Order inside the top-k
does not matter. The rate is retrieved images over all labelled images,
as a percentage.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Corpus, LabelledGroup, char_cosine_similarity
from .embeddings import EmbeddingStore
from .errors import EvaluationError, IncomparableDescriptorsError
from .metrics import MetricConfig, all_metrics
from .retrieval import Index, QueryFilter, build_index, max_normalized_grid, query_top_k
from .sift import sift_distance

DEFAULT_KS = (5, 10, 15, 20)


def _check_members(index_ids, groups: Sequence[LabelledGroup]) -> None:
    known = set(index_ids)
    for g in groups:
        for app_id in g.all_ids():
            if app_id not in known:
                raise EvaluationError(f"labelled app {app_id!r} is not in the index")


def retrieval_rate(index: Index, groups: Sequence[LabelledGroup], k: int) -> float:
    """Percentage of labelled images found in a group-mate's top-k.

    Retrieval is counted within each group independently, so an app that
    somehow appears in two groups is scored once per membership.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not groups:
        raise EvaluationError("no labelled groups to evaluate")
    _check_members(index.store.app_ids, groups)
    retrieved = 0
    total = 0
    for g in groups:
        ids = g.all_ids()
        total += len(ids)
        members = set(ids)
        found: set[str] = set()
        for query_id in ids:
            results = query_top_k(
                index,
                index.embedding_of(query_id),
                k,
                QueryFilter(exclude_self=True),
            )
            for r in results:
                if r.app_id in members and r.app_id != query_id:
                    found.add(r.app_id)
        retrieved += len(found)
    return 100.0 * retrieved / total


@dataclass
class EvaluationReport:
    """Rates for every (metric, k) cell plus the hits behind them."""

    ks: tuple[int, ...]
    metric_labels: tuple[str, ...]
    rates: dict[tuple[str, int], float]
    hits: dict[tuple[str, int], dict[str, list[str]]]
    group_count: int
    labelled_total: int

    def rate(self, label: str, k: int) -> float:
        return self.rates[(label, k)]


def evaluate_grid(
    store: EmbeddingStore,
    corpus: Corpus,
    groups: Sequence[LabelledGroup],
    ks: Sequence[int] = DEFAULT_KS,
    metrics: Sequence[MetricConfig] | None = None,
) -> EvaluationReport:
    """Retrieval rates for every metric × k cell.

    Each query runs once at max(ks); smaller k cells reuse the prefix of
    that ranking, which also makes monotonicity in k structural.
    """
    if not ks or any(k < 1 for k in ks):
        raise ValueError(f"ks must be positive, got {ks!r}")
    if not groups:
        raise EvaluationError("no labelled groups to evaluate")
    metrics = tuple(metrics) if metrics is not None else all_metrics()
    ks = tuple(sorted(set(ks)))
    k_max = ks[-1]
    if len({g.base_app_id for g in groups}) != len(groups):
        raise EvaluationError("labelled groups must have distinct base apps")
    _check_members(store.app_ids, groups)
    rates: dict[tuple[str, int], float] = {}
    hits: dict[tuple[str, int], dict[str, list[str]]] = {}
    labelled_total = sum(len(g.all_ids()) for g in groups)
    for metric in metrics:
        index = build_index(store, corpus, metric)
        per_group_hits: dict[int, dict[str, set[str]]] = {k: {} for k in ks}
        for g in groups:
            ids = g.all_ids()
            members = set(ids)
            found_at: dict[str, int] = {}
            for query_id in ids:
                results = query_top_k(
                    index,
                    index.embedding_of(query_id),
                    k_max,
                    QueryFilter(exclude_self=True),
                )
                for r in results:
                    if r.app_id in members and r.app_id != query_id:
                        best = found_at.get(r.app_id)
                        if best is None or r.rank < best:
                            found_at[r.app_id] = r.rank
            for k in ks:
                per_group_hits[k][g.base_app_id] = {
                    app_id for app_id, rank in found_at.items() if rank <= k
                }
        for k in ks:
            all_hits = per_group_hits[k]
            retrieved = sum(len(v) for v in all_hits.values())
            rates[(metric.label, k)] = 100.0 * retrieved / labelled_total
            hits[(metric.label, k)] = {
                base: sorted(v) for base, v in all_hits.items()
            }
    return EvaluationReport(
        ks=ks,
        metric_labels=tuple(m.label for m in metrics),
        rates=rates,
        hits=hits,
        group_count=len(groups),
        labelled_total=labelled_total,
    )


def format_rate_table(report: EvaluationReport) -> str:
    """Plain-text metric × top-k grid."""
    header = ["metric"] + [f"top-{k}" for k in report.ks]
    rows = [header]
    for label in report.metric_labels:
        rows.append(
            [label] + [f"{report.rates[(label, k)]:.2f}" for k in report.ks]
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for r in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    return "\n".join(lines)


def threshold_curve(
    index: Index,
    groups: Sequence[LabelledGroup],
    k: int = 10,
    step: float = 0.01,
) -> list[tuple[float, float]]:
    """Retrieval rate as a function of the normalized distance threshold.

    For each labelled image the minimal normalized distance at which any
    group-mate's top-k query reaches it is recorded; the curve is the
    cumulative percentage of images reachable at each grid threshold.
    """
    if index.metric.norm != "cos":
        raise EvaluationError("threshold curves need a cosine metric")
    if not groups:
        raise EvaluationError("no labelled groups to evaluate")
    _check_members(index.store.app_ids, groups)
    reach: dict[tuple[int, str], float] = {}
    total = 0
    for gi, g in enumerate(groups):
        ids = g.all_ids()
        total += len(ids)
        members = set(ids)
        for query_id in ids:
            for r in query_top_k(
                index, index.embedding_of(query_id), k, QueryFilter(exclude_self=True)
            ):
                if r.app_id in members and r.app_id != query_id:
                    key = (gi, r.app_id)
                    prev = reach.get(key)
                    if prev is None or r.normalized_distance < prev:
                        reach[key] = r.normalized_distance
    reachable = np.asarray(sorted(reach.values()))
    curve = []
    for t in max_normalized_grid(step):
        count = int(np.searchsorted(reachable, t, side="right")) if reachable.size else 0
        curve.append((float(t), 100.0 * count / total))
    return curve


def sift_retrieval_rate(
    corpus: Corpus,
    descriptor_sets: Sequence[np.ndarray],
    groups: Sequence[LabelledGroup],
    k: int,
) -> tuple[float, list[str]]:
    """Retrieval rate for the keypoint baseline, and the skipped app ids.

    Icons without any keypoints cannot be compared; they are removed from
    both the query and candidate sides and reported separately. The rate
    denominator only counts comparable labelled images.
    """
    if len(descriptor_sets) != len(corpus):
        raise EvaluationError(
            f"{len(descriptor_sets)} descriptor sets for {len(corpus)} records"
        )
    _check_members([r.app_id for r in corpus], groups)
    app_ids = [r.app_id for r in corpus]
    comparable = {app_ids[i] for i, d in enumerate(descriptor_sets) if d.shape[0] > 0}
    excluded = sorted(
        {a for g in groups for a in g.all_ids() if a not in comparable}
    )
    sets_by_id = {app_ids[i]: descriptor_sets[i] for i in range(len(corpus))}
    candidate_ids = sorted(comparable)
    retrieved = 0
    total = 0
    for g in groups:
        ids = [a for a in g.all_ids() if a in comparable]
        total += len(ids)
        members = set(ids)
        found: set[str] = set()
        for query_id in ids:
            dists = []
            for cand in candidate_ids:
                if cand == query_id:
                    continue
                try:
                    d = sift_distance(sets_by_id[query_id], sets_by_id[cand])
                except IncomparableDescriptorsError:
                    continue
                dists.append((d, cand))
            dists.sort()
            for d, cand in dists[:k]:
                if cand in members and cand != query_id:
                    found.add(cand)
        retrieved += len(found)
    if total == 0:
        raise EvaluationError("no comparable labelled images for the keypoint baseline")
    return 100.0 * retrieved / total, excluded


@dataclass(frozen=True)
class CandidateHit:
    app_id: str
    raw_distance: float
    normalized_distance: float
    rank: int
    name_similarity: float
    downloads: int


@dataclass(frozen=True)
class TargetReport:
    app_id: str
    developer: str
    category: str
    downloads: int
    candidates: tuple[CandidateHit, ...]


@dataclass
class CounterfeitReport:
    targets: tuple[TargetReport, ...] = ()
    unique_candidates: tuple[str, ...] = ()
    k: int = 10
    threshold: float = 0.0

    @property
    def total_hits(self) -> int:
        return sum(len(t.candidates) for t in self.targets)


def counterfeit_report(
    index: Index,
    corpus: Corpus,
    targets: Sequence[str],
    k: int = 10,
    threshold: float = 0.27,
) -> CounterfeitReport:
    """Potential impersonators of each target app.

    Candidates come from a top-k query that drops the target's own
    developer, keeps the target's category, and cuts at the normalized
    distance threshold. A candidate similar to several targets is listed
    under each, but the unique-candidate summary counts it once.
    """
    reports = []
    unique: set[str] = set()
    for app_id in targets:
        if app_id not in corpus:
            raise EvaluationError(f"target {app_id!r} is not in the corpus")
        record = corpus.get(app_id)
        results = query_top_k(
            index,
            index.embedding_of(app_id),
            k,
            QueryFilter(
                exclude_developer=record.developer,
                require_category=record.category,
                exclude_self=True,
            ),
            max_normalized_distance=threshold,
        )
        candidates = []
        for r in results:
            cand = corpus.get(r.app_id)
            candidates.append(
                CandidateHit(
                    app_id=r.app_id,
                    raw_distance=r.raw_distance,
                    normalized_distance=r.normalized_distance,
                    rank=r.rank,
                    name_similarity=char_cosine_similarity(
                        cand.app_name, record.app_name
                    ),
                    downloads=cand.downloads,
                )
            )
            unique.add(r.app_id)
        reports.append(
            TargetReport(
                app_id=app_id,
                developer=record.developer,
                category=record.category,
                downloads=record.downloads,
                candidates=tuple(candidates),
            )
        )
    return CounterfeitReport(
        targets=tuple(reports),
        unique_candidates=tuple(sorted(unique)),
        k=k,
        threshold=threshold,
    )
