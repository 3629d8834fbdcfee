"""Index-size ablation: P@1 as a function of samples per class.

A fixed, seeded query set is drawn once from the test pool. Then, for
every N in the schedule and every repetition, N train samples per eligible
class are drawn into a fresh index and top-1 precision of the fixed
queries is recorded. Within a repetition the per-class draws are nested
(the N=5 subset is contained in the N=50 subset and so on), which removes
resampling noise from the shape of the curve; set independent_draws for
fully independent sampling at each N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import batch_top_n
from .errors import InsufficientQueries, InvalidManifest
from .metrics import judge, precision_at_n_micro
from .store import VectorIndex

DEFAULT_N_SCHEDULE = (5, 10, 25, 50, 100, 250, 500, 1000, 2000, 3000)


@dataclass(frozen=True)
class AblationConfig:
    min_class_size: int = 3000
    queries_per_class: int = 38
    n_schedule: tuple[int, ...] = DEFAULT_N_SCHEDULE
    repetitions: int = 3
    seed: int = 0
    independent_draws: bool = False

    def __post_init__(self):
        schedule = tuple(int(n) for n in self.n_schedule)
        if not schedule:
            raise ValueError("n_schedule must be non-empty")
        if any(b <= a for a, b in zip(schedule, schedule[1:])):
            raise ValueError(f"n_schedule must be strictly increasing, got {schedule}")
        if schedule[0] < 5 or schedule[-1] > 3000:
            raise ValueError("n_schedule values must lie within [5, 3000]")
        if schedule[-1] > self.min_class_size:
            raise ValueError(
                f"largest N ({schedule[-1]}) exceeds min_class_size "
                f"({self.min_class_size}); such cells could not be filled"
            )
        if self.queries_per_class < 1:
            raise ValueError("queries_per_class must be >= 1")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        object.__setattr__(self, "n_schedule", schedule)


@dataclass(frozen=True)
class AblationRow:
    n: int
    seed: int
    p_at_1: float


@dataclass(frozen=True)
class AblationCurve:
    rows: tuple[AblationRow, ...]
    eligible_class_ids: tuple[int, ...]
    queries_per_class: int

    def mean_per_n(self) -> dict[int, float]:
        by_n: dict[int, list[float]] = {}
        for row in self.rows:
            by_n.setdefault(row.n, []).append(row.p_at_1)
        return {n: float(np.mean(vals)) for n, vals in sorted(by_n.items())}

    def csv_rows(self) -> list[tuple[int, int, float]]:
        return [(r.n, r.seed, r.p_at_1) for r in self.rows]

    def as_dict(self) -> dict:
        return {
            "eligible_class_ids": list(self.eligible_class_ids),
            "queries_per_class": self.queries_per_class,
            "mean_p_at_1": {str(n): v for n, v in self.mean_per_n().items()},
            "rows": [
                {"n": r.n, "seed": r.seed, "p_at_1": r.p_at_1} for r in self.rows
            ],
        }


def eligible_classes(labels, min_class_size: int) -> list[int]:
    """Class ids with strictly more than min_class_size labeled samples."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return []
    counts = np.bincount(labels)
    return [int(c) for c in np.flatnonzero(counts > min_class_size)]


def fixed_query_set(
    labels, eligible: list[int], queries_per_class: int, seed: int
) -> np.ndarray:
    """Positions of a seeded, class-balanced query sample.

    Selection is independent per class (each class gets its own seeded
    stream), so adding classes never reshuffles existing ones.

    Raises:
        InsufficientQueries: some eligible class is too small, named in
            the message.
    """
    labels = np.asarray(labels, dtype=np.int64)
    chosen: list[np.ndarray] = []
    for cid in eligible:
        pool = np.flatnonzero(labels == cid)
        if pool.size < queries_per_class:
            raise InsufficientQueries(
                f"class {cid} has only {pool.size} query candidates, "
                f"need {queries_per_class}"
            )
        rng = np.random.default_rng([seed, cid])
        perm = rng.permutation(pool.size)
        chosen.append(np.sort(pool[perm[:queries_per_class]]))
    return np.concatenate(chosen) if chosen else np.empty(0, dtype=np.intp)


def _class_pools(labels: np.ndarray, eligible: list[int]) -> dict[int, np.ndarray]:
    return {cid: np.flatnonzero(labels == cid) for cid in eligible}


def _sampled_positions(
    pools: dict[int, np.ndarray],
    n: int,
    rep_seed: int,
    nested_perms: dict[int, np.ndarray] | None,
) -> np.ndarray:
    parts: list[np.ndarray] = []
    for cid, pool in pools.items():
        if nested_perms is not None:
            parts.append(pool[nested_perms[cid][:n]])
        else:
            rng = np.random.default_rng([rep_seed, cid, n])
            parts.append(rng.choice(pool, size=n, replace=False))
    return np.sort(np.concatenate(parts))


def run_ablation(
    train: VectorIndex,
    test: VectorIndex,
    config: AblationConfig = AblationConfig(),
    workers: int = 1,
) -> AblationCurve:
    """Trace P@1 micro of the fixed query set across index sizes.

    ``train`` supplies the per-class sampling pools, ``test`` the query
    pool; their record ids must be disjoint (they come from different
    splits). One row is produced per (N, repetition).

    Raises:
        ValueError: no class clears min_class_size.
        InsufficientQueries: the fixed query set cannot be filled.
        InvalidManifest: train and test share record ids.
    """
    if set(train.record_ids.tolist()) & set(test.record_ids.tolist()):
        raise InvalidManifest("train and test pools share record ids")
    eligible = eligible_classes(train.labels, config.min_class_size)
    if not eligible:
        raise ValueError(
            f"no class has more than {config.min_class_size} train samples"
        )
    query_pos = fixed_query_set(
        test.labels, eligible, config.queries_per_class, config.seed
    )
    queries = [
        (int(test.record_ids[p]), test.vectors[p]) for p in query_pos
    ]
    query_classes = [int(test.labels[p]) for p in query_pos]
    pools = _class_pools(train.labels, eligible)

    rows: list[AblationRow] = []
    for rep in range(config.repetitions):
        rep_seed = config.seed + 1 + rep
        nested = None
        if not config.independent_draws:
            nested = {
                cid: np.random.default_rng([rep_seed, cid]).permutation(pool.size)
                for cid, pool in pools.items()
            }
        for n in config.n_schedule:
            positions = _sampled_positions(pools, n, rep_seed, nested)
            sub = VectorIndex(
                train.vectors[positions],
                train.labels[positions],
                train.record_ids[positions],
                train.class_table,
            )
            results = batch_top_n(queries, sub, n=1, workers=workers)
            labels_map = sub.labels_by_record()
            judgments = [
                judge(res, cls, labels_map, 1)
                for res, cls in zip(results, query_classes)
            ]
            rows.append(
                AblationRow(
                    n=n,
                    seed=rep_seed,
                    p_at_1=precision_at_n_micro(judgments, 1),
                )
            )
    return AblationCurve(
        rows=tuple(rows),
        eligible_class_ids=tuple(eligible),
        queries_per_class=config.queries_per_class,
    )
