"""Exact top-N cosine-similarity search over a VectorIndex.

Determinism contract: every similarity is produced by the platform BLAS
float32 matrix product with one fixed call geometry. The index is walked
in fixed 4,096-row chunks and the query side is always padded with zero
columns to exactly 64, so the kernel sees identical shapes no matter how
many queries arrive together. BLAS accumulation order varies with call
shape, but within a fixed shape a column's bits do not depend on its
position or on what the other columns hold, so a query's similarities are
bit-identical whether it runs alone, inside any batch, or on any worker
count. Selection sorts candidates by (descending similarity, ascending
record_id), a total order, so ranking is reproducible even under exact
similarity ties.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionMismatch, EmptyIndex, NormViolation
from .store import UNIT_NORM_TOL, VectorIndex

# Fixed kernel geometry. Changing either constant changes similarity bits
# (BLAS blocking depends on call shape), so they are part of the format of
# reproducible results, not tuning knobs.
SCAN_CHUNK_ROWS = 4096
QUERY_BLOCK = 64

# Sentinel for the self-excluded row on the negated scale: valid negated
# similarities lie in [-1, 1], so 3.0 always sorts last.
_EXCLUDED = np.float32(3.0)


class SearchHit(NamedTuple):
    record_id: int
    similarity: float


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked hits for one query, best first."""

    query_record_id: int | None
    hits: tuple[SearchHit, ...]

    def record_ids(self) -> list[int]:
        return [h.record_id for h in self.hits]


def _as_query_block(queries, dimension: int) -> np.ndarray:
    block = np.ascontiguousarray(queries, dtype=np.float32)
    if block.ndim == 1:
        block = block[None, :]
    if block.shape[1] != dimension:
        raise DimensionMismatch(
            f"query dimension {block.shape[1]} != index dimension {dimension}"
        )
    return block


def _check_unit_norms(block: np.ndarray, ids) -> None:
    norms = np.sqrt(np.einsum("ij,ij->i", block, block, dtype=np.float64))
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if bad.size:
        i = int(bad[0])
        who = f"query {ids[i]}" if ids is not None else "query"
        raise NormViolation(
            f"{who} has norm {norms[i]:.8f}, outside 1 +/- {UNIT_NORM_TOL}; "
            "normalize before searching"
        )


def _scan(vectors: np.ndarray, block: np.ndarray) -> np.ndarray:
    """Similarities of every index row against every query in the block.

    Returns an (M, B) float32 array clamped to [-1, 1]. The block (B <=
    QUERY_BLOCK rows) is zero-padded to exactly QUERY_BLOCK columns before
    the product so the kernel geometry never varies; pad columns are
    dropped from the result.
    """
    n_queries, dim = block.shape
    if n_queries > QUERY_BLOCK:
        raise ValueError(f"scan blocks are capped at {QUERY_BLOCK} queries")
    padded = np.zeros((QUERY_BLOCK, dim), dtype=np.float32)
    padded[:n_queries] = block
    qt = np.ascontiguousarray(padded.T)
    count = vectors.shape[0]
    out = np.empty((count, QUERY_BLOCK), dtype=np.float32)
    for start in range(0, count, SCAN_CHUNK_ROWS):
        stop = min(start + SCAN_CHUNK_ROWS, count)
        np.matmul(vectors[start:stop], qt, out=out[start:stop])
    np.clip(out, -1.0, 1.0, out=out)
    return out[:, :n_queries]


def _select(
    sims: np.ndarray,
    record_ids: np.ndarray,
    n: int,
    exclude_pos: int | None,
) -> tuple[SearchHit, ...]:
    """Exact top-n rows by (similarity desc, record_id asc)."""
    neg = -sims
    available = neg.shape[0]
    if exclude_pos is not None:
        neg[exclude_pos] = _EXCLUDED
        available -= 1
    k = min(n, available)
    if k == 0:
        return ()
    if k < available:
        head = np.argpartition(neg, k - 1)[:k]
        boundary = neg[head].max()
        candidates = np.flatnonzero(neg <= boundary)
    else:
        candidates = np.flatnonzero(neg <= np.float32(1.0))
    order = np.lexsort((record_ids[candidates], neg[candidates]))
    chosen = candidates[order[:k]]
    return tuple(
        SearchHit(int(record_ids[pos]), float(-neg[pos])) for pos in chosen
    )


def cosine_similarity(a, b) -> float:
    """Dot product of two unit vectors, clamped to [-1, 1].

    Runs through the same fixed-geometry kernel as the scan (a one-row
    index), so a given pair always yields the bit-identical value.

    Raises:
        DimensionMismatch: unequal lengths.
        NormViolation: either input is not unit norm within 1e-5.
    """
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("cosine_similarity expects 1-D vectors")
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension {a.size} != {b.size}")
    _check_unit_norms(np.vstack((a, b)), None)
    return float(_scan(b[None, :], a[None, :])[0, 0])


def top_n(
    query,
    index: VectorIndex,
    n: int,
    exclude_id: int | None = None,
    query_record_id: int | None = None,
) -> RetrievalResult:
    """The n most similar index entries, best first.

    Ties in similarity rank the lower record_id first. If the index holds
    fewer than n candidates (after optional self-exclusion), all of them
    are returned.

    Raises:
        EmptyIndex: the index has no vectors.
        DimensionMismatch: query length differs from the index dimension.
        NormViolation: query is not unit norm within 1e-5.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if index.count == 0:
        raise EmptyIndex("cannot search an index with zero vectors")
    block = _as_query_block(query, index.dimension)
    if block.shape[0] != 1:
        raise ValueError("top_n takes a single query vector; use batch_top_n")
    ids = [query_record_id] if query_record_id is not None else None
    _check_unit_norms(block, ids)
    sims = _scan(index.vectors, block)[:, 0]
    exclude_pos = index.position_of(exclude_id) if exclude_id is not None else None
    hits = _select(sims, index.record_ids, n, exclude_pos)
    return RetrievalResult(query_record_id=query_record_id, hits=hits)


def _run_block(
    index: VectorIndex,
    ids: list[int],
    block: np.ndarray,
    n: int,
    exclude_self: bool,
) -> list[RetrievalResult]:
    sims = _scan(index.vectors, block)
    results: list[RetrievalResult] = []
    for j, rid in enumerate(ids):
        exclude_pos = index.position_of(rid) if exclude_self else None
        hits = _select(sims[:, j], index.record_ids, n, exclude_pos)
        results.append(RetrievalResult(query_record_id=rid, hits=hits))
    return results


def batch_top_n(
    queries,
    index: VectorIndex,
    n: int,
    exclude_self: bool = False,
    workers: int = 1,
) -> list[RetrievalResult]:
    """top_n for many (record_id, vector) queries, in input order.

    Results are identical to sequential top_n calls for any worker count;
    workers only spread fixed 64-query blocks across threads (the scan
    releases the interpreter lock inside BLAS).

    Raises:
        EmptyIndex, DimensionMismatch, NormViolation: as top_n; messages
            name the offending query_record_id.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    queries = list(queries)
    if not queries:
        return []
    if index.count == 0:
        raise EmptyIndex("cannot search an index with zero vectors")
    ids = [int(rid) for rid, _ in queries]
    block_all = _as_query_block([vec for _, vec in queries], index.dimension)
    _check_unit_norms(block_all, ids)

    spans = [
        (start, min(start + QUERY_BLOCK, len(ids)))
        for start in range(0, len(ids), QUERY_BLOCK)
    ]
    if workers == 1 or len(spans) == 1:
        chunks = [
            _run_block(index, ids[a:b], block_all[a:b], n, exclude_self)
            for a, b in spans
        ]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(
                    _run_block, index, ids[a:b], block_all[a:b], n, exclude_self
                )
                for a, b in spans
            ]
            chunks = [f.result() for f in futures]
    return [res for chunk in chunks for res in chunk]
