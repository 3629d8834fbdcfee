"""Precision@N scoring of retrieval results, micro- and macro-averaged.

P@N for one query is the fraction of its first N hits sharing the query's
class. Micro averaging means every query weighs equally; macro averaging
first averages within each query class, then averages the class means
without weights. Short hit lists are hard errors, never padded: the metric
divides by N unconditionally, so padding would silently redefine it.
"""

from __future__ import annotations

from collections import defaultdict
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .engine import RetrievalResult
from .errors import EmptyQuerySet, InsufficientHits, UnknownRecordId
from .store import VectorIndex

# Every report carries at least these N values.
REPORT_NS = (1, 3, 5, 10)


@dataclass(frozen=True)
class RelevanceJudgment:
    """Binary relevance of each ranked hit for one query."""

    query_record_id: int | None
    query_class: int
    rel: np.ndarray

    def __post_init__(self):
        rel = np.ascontiguousarray(self.rel, dtype=np.uint8)
        if rel.ndim != 1:
            raise ValueError(f"rel must be 1-D, got shape {rel.shape}")
        if rel.size and rel.max() > 1:
            raise ValueError("rel entries must be 0 or 1")
        rel.setflags(write=False)
        object.__setattr__(self, "rel", rel)


@dataclass(frozen=True)
class PerClassRow:
    class_id: int
    class_name: str
    class_kind: str
    query_count: int
    index_count: int
    p_at_1: float


@dataclass(frozen=True)
class MetricsReport:
    """P@N values plus the per-class breakdown, ready to serialize."""

    p_at_n_micro: dict[int, float]
    p_at_n_macro: dict[int, float]
    per_class: tuple[PerClassRow, ...]

    def as_dict(self) -> dict:
        return {
            "p_at_n_micro": {str(n): v for n, v in sorted(self.p_at_n_micro.items())},
            "p_at_n_macro": {str(n): v for n, v in sorted(self.p_at_n_macro.items())},
            "per_class": [
                {
                    "class_id": row.class_id,
                    "class_name": row.class_name,
                    "class_kind": row.class_kind,
                    "query_count": row.query_count,
                    "index_count": row.index_count,
                    "p_at_1": row.p_at_1,
                }
                for row in self.per_class
            ],
        }

    def metric_rows(self) -> list[tuple[str, int, str, float]]:
        """Flat (metric, n, averaging, value) rows for CSV export."""
        rows: list[tuple[str, int, str, float]] = []
        for n in sorted(self.p_at_n_micro):
            rows.append(("p_at_n", n, "micro", self.p_at_n_micro[n]))
        for n in sorted(self.p_at_n_macro):
            rows.append(("p_at_n", n, "macro", self.p_at_n_macro[n]))
        return rows


def judge(
    result: RetrievalResult,
    query_class: int,
    index_labels: Mapping[int, int],
    n: int,
) -> RelevanceJudgment:
    """Mark each of the first n hits relevant iff it shares the query class.

    Raises:
        InsufficientHits: the result carries fewer than n hits.
        UnknownRecordId: a hit's record_id has no label.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if len(result.hits) < n:
        raise InsufficientHits(
            f"query {result.query_record_id}: {len(result.hits)} hits < n={n}; "
            "the index is too small for this N"
        )
    rel = np.zeros(n, dtype=np.uint8)
    for j, hit in enumerate(result.hits[:n]):
        label = index_labels.get(hit.record_id)
        if label is None:
            raise UnknownRecordId(f"hit record {hit.record_id} has no label")
        rel[j] = 1 if label == query_class else 0
    return RelevanceJudgment(result.query_record_id, query_class, rel)


def _per_query(judgments: Sequence[RelevanceJudgment], n: int) -> np.ndarray:
    if not judgments:
        raise EmptyQuerySet("no relevance judgments to average")
    vals = np.empty(len(judgments), dtype=np.float64)
    for i, jd in enumerate(judgments):
        if jd.rel.size < n:
            raise InsufficientHits(
                f"query {jd.query_record_id}: judgment covers {jd.rel.size} "
                f"positions < n={n}"
            )
        vals[i] = float(jd.rel[:n].sum()) / n
    return vals


def precision_at_n_micro(judgments: Sequence[RelevanceJudgment], n: int) -> float:
    """Mean per-query P@n over all queries, every query weighted equally."""
    return float(np.mean(_per_query(judgments, n)))


def precision_at_n_macro(judgments: Sequence[RelevanceJudgment], n: int) -> float:
    """Unweighted mean over query classes of the class-mean P@n.

    Classes with zero queries simply do not appear and are excluded.
    """
    vals = _per_query(judgments, n)
    by_class: dict[int, list[float]] = defaultdict(list)
    for jd, v in zip(judgments, vals):
        by_class[jd.query_class].append(v)
    class_means = [float(np.mean(vs)) for _, vs in sorted(by_class.items())]
    return float(np.mean(class_means))


def per_class_report(
    judgments: Sequence[RelevanceJudgment], index: VectorIndex
) -> tuple[PerClassRow, ...]:
    """One row per query class, sorted by how often the class is indexed.

    The sort (index count ascending, class id tie-break) puts rare classes
    first, matching frequency-vs-quality plots.
    """
    if not judgments:
        raise EmptyQuerySet("no relevance judgments to report on")
    counts = index.class_counts()
    table = index.class_table
    by_class: dict[int, list[int]] = defaultdict(list)
    for jd in judgments:
        if jd.rel.size < 1:
            raise InsufficientHits(f"query {jd.query_record_id}: empty judgment")
        by_class[jd.query_class].append(int(jd.rel[0]))
    rows = [
        PerClassRow(
            class_id=cid,
            class_name=table.name_of(cid),
            class_kind=table.kind_of(cid),
            query_count=len(firsts),
            index_count=int(counts[cid]) if cid < counts.size else 0,
            p_at_1=float(np.mean(firsts)),
        )
        for cid, firsts in by_class.items()
    ]
    rows.sort(key=lambda r: (r.index_count, r.class_id))
    return tuple(rows)


def evaluate_retrieval(
    results: Sequence[RetrievalResult],
    query_classes: Sequence[int],
    index: VectorIndex,
    n_values: Sequence[int] = (),
) -> MetricsReport:
    """Judge every result against the index and score all requested N.

    The report always includes N in {1, 3, 5, 10} plus any extra n_values.

    Raises:
        EmptyQuerySet, InsufficientHits, UnknownRecordId: as the underlying
            scoring steps.
    """
    if len(results) != len(query_classes):
        raise ValueError("results and query_classes must have equal length")
    if not results:
        raise EmptyQuerySet("no retrieval results to evaluate")
    ns = sorted(set(REPORT_NS) | {int(n) for n in n_values})
    labels = index.labels_by_record()
    n_max = max(ns)
    judgments = [
        judge(res, cls, labels, n_max)
        for res, cls in zip(results, query_classes)
    ]
    return MetricsReport(
        p_at_n_micro={n: precision_at_n_micro(judgments, n) for n in ns},
        p_at_n_macro={n: precision_at_n_macro(judgments, n) for n in ns},
        per_class=per_class_report(judgments, index),
    )
