"""Embedding store: manifest preparation, normalization, and index building.

The store ingests raw embedding records plus a dataset manifest, applies the
preparation rules (dedup, multi-label exclusion, label aliasing, patient-wise
splitting), L2-normalizes every vector, and produces an immutable
:class:`VectorIndex` that downstream search and evaluation operate on.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidManifest,
    MissingHash,
    MissingPatientId,
    MultiLabelRecord,
    NonFiniteVector,
    UnknownRecordId,
    ZeroVector,
)

SPLITS = ("train", "val", "test")
CLASS_KINDS = ("pathological", "anatomical")

# Producers guarantee unit vectors to this tolerance; consumers validate it.
UNIT_NORM_TOL = 1e-5


@dataclass(frozen=True)
class ManifestEntry:
    """One image's identity, labels, and split assignment."""

    record_id: int
    source_path: str
    labels: tuple[str, ...]
    dataset: str
    split: str
    patient_id: str | None = None
    content_hash: str | None = None
    class_kind: str = "pathological"

    def __post_init__(self):
        if self.record_id < 0:
            raise InvalidManifest(f"record_id must be unsigned, got {self.record_id}")
        if not self.labels:
            raise InvalidManifest(f"record {self.record_id}: labels must be non-empty")
        if self.split not in SPLITS:
            raise InvalidManifest(
                f"record {self.record_id}: split must be one of {SPLITS}, got {self.split!r}"
            )
        if self.class_kind not in CLASS_KINDS:
            raise InvalidManifest(
                f"record {self.record_id}: class_kind must be one of {CLASS_KINDS}, "
                f"got {self.class_kind!r}"
            )


@dataclass(frozen=True)
class EmbeddingRecord:
    """One image's raw (possibly unnormalized) feature vector."""

    record_id: int
    vector: np.ndarray


@dataclass(frozen=True)
class PreparationRules:
    """Dataset-preparation policy: what to dedup, exclude, rename, and split.

    patient_split_datasets and val_fraction drive the patient-wise
    validation carve-out applied by the ingest pipeline after
    prepare_manifest; prepare_manifest itself does not consume them.
    """

    dedup_datasets: frozenset[str] = frozenset()
    multilabel_exclude_datasets: frozenset[str] = frozenset()
    label_aliases: Mapping[str, str] = field(default_factory=dict)
    patient_split_datasets: frozenset[str] = frozenset()
    val_fraction: float = 0.1


@dataclass
class PreparationLog:
    input_count: int = 0
    retained_count: int = 0
    duplicates_dropped: int = 0
    multilabel_dropped: int = 0
    labels_aliased: int = 0
    per_dataset: dict[str, dict[str, int]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "input_count": self.input_count,
            "retained_count": self.retained_count,
            "duplicates_dropped": self.duplicates_dropped,
            "multilabel_dropped": self.multilabel_dropped,
            "labels_aliased": self.labels_aliased,
            "per_dataset": {k: dict(v) for k, v in sorted(self.per_dataset.items())},
        }


def l2_normalize(vector) -> np.ndarray:
    """Scale ``vector`` to unit Euclidean norm.

    The norm is accumulated in float64 and the result is stored as float32,
    so the returned vector's norm is 1 within 1e-6. Degenerate inputs are
    hard errors: silently passing them through would corrupt class-averaged
    metrics downstream.

    Raises:
        ZeroVector: if the norm is below 1e-12.
        NonFiniteVector: if any entry is NaN or infinite.
    """
    arr = np.asarray(vector, dtype=np.float32)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError(f"expected a 1-D vector of length >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteVector("vector contains NaN or infinite entries")
    wide = arr.astype(np.float64)
    norm = float(np.sqrt(np.dot(wide, wide)))
    if norm < 1e-12:
        raise ZeroVector(f"vector norm {norm:.3e} is below 1e-12")
    return (wide / norm).astype(np.float32)


def _apply_aliases(labels: tuple[str, ...], aliases: Mapping[str, str]) -> tuple[tuple[str, ...], int]:
    if not aliases:
        return labels, 0
    renamed = 0
    out: list[str] = []
    for name in labels:
        canonical = aliases.get(name, name)
        if canonical != name:
            renamed += 1
        if canonical not in out:
            out.append(canonical)
    return tuple(out), renamed


def prepare_manifest(
    raw: Sequence[ManifestEntry], rules: PreparationRules
) -> tuple[list[ManifestEntry], PreparationLog]:
    """Apply dataset-preparation rules in file order.

    Label aliases are applied first (harmonization precedes the single-label
    check, so labels that merge under an alias count as one). Then, for
    datasets flagged for dedup, an entry whose content_hash was already seen
    earlier in the same dataset is dropped; for datasets flagged
    multi-label-excluded, entries with more than one (post-alias) label are
    dropped. First occurrence wins; output depends only on input order and
    rules.

    Raises:
        MissingHash: a dedup-flagged dataset has an entry without content_hash.
        InvalidManifest: duplicate record_id.
    """
    log = PreparationLog(input_count=len(raw))
    seen_ids: set[int] = set()
    seen_hashes: dict[str, set[str]] = {}
    prepared: list[ManifestEntry] = []

    for entry in raw:
        if entry.record_id in seen_ids:
            raise InvalidManifest(f"duplicate record_id {entry.record_id}")
        seen_ids.add(entry.record_id)

        dataset_log = log.per_dataset.setdefault(
            entry.dataset, {"duplicates": 0, "multi_label": 0, "retained": 0}
        )

        labels, renamed = _apply_aliases(entry.labels, rules.label_aliases)
        log.labels_aliased += renamed
        if labels != entry.labels:
            entry = dataclasses.replace(entry, labels=labels)

        if entry.dataset in rules.dedup_datasets:
            if not entry.content_hash:
                raise MissingHash(
                    f"record {entry.record_id}: dataset {entry.dataset!r} is "
                    "deduplicated but the entry has no content_hash"
                )
            seen = seen_hashes.setdefault(entry.dataset, set())
            if entry.content_hash in seen:
                log.duplicates_dropped += 1
                dataset_log["duplicates"] += 1
                continue
            seen.add(entry.content_hash)

        if entry.dataset in rules.multilabel_exclude_datasets and len(entry.labels) > 1:
            log.multilabel_dropped += 1
            dataset_log["multi_label"] += 1
            continue

        dataset_log["retained"] += 1
        prepared.append(entry)

    log.retained_count = len(prepared)
    return prepared, log


def patient_wise_split(
    entries: Sequence[ManifestEntry], val_fraction: float, seed: int
) -> list[ManifestEntry]:
    """Carve a validation set out of the train split at patient granularity.

    Patients (never individual samples) are shuffled with a seeded RNG and
    round(val_fraction * patient_count) of them move to val, taking all their
    samples along, so no patient straddles train and val. Rounding is
    half-up for determinism. Entries not currently in train pass through
    unchanged.

    Raises:
        MissingPatientId: any entry lacks a patient_id.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    for entry in entries:
        if not entry.patient_id:
            raise MissingPatientId(f"record {entry.record_id} has no patient_id")

    train_patients = sorted({e.patient_id for e in entries if e.split == "train"})
    n_val = int(val_fraction * len(train_patients) + 0.5)
    perm = np.random.default_rng(seed).permutation(len(train_patients))
    val_patients = {train_patients[i] for i in perm[:n_val]}

    out: list[ManifestEntry] = []
    for entry in entries:
        if entry.split == "train" and entry.patient_id in val_patients:
            entry = dataclasses.replace(entry, split="val")
        out.append(entry)
    return out


class ClassTable:
    """Bidirectional class-name <-> class-id map with a kind flag per class.

    Ids are assigned by sorted class name, so a table built from the same
    manifest is always identical. Build it from the full manifest (all
    splits) so query-side and index-side class ids agree.
    """

    def __init__(self, names: Sequence[str], kinds: Sequence[str]):
        if len(names) != len(kinds):
            raise ValueError("names and kinds must have equal length")
        for kind in kinds:
            if kind not in CLASS_KINDS:
                raise InvalidManifest(f"unknown class_kind {kind!r}")
        if len(set(names)) != len(names):
            raise InvalidManifest("duplicate class names in class table")
        self._names = tuple(names)
        self._kinds = tuple(kinds)
        self._ids = {name: i for i, name in enumerate(self._names)}

    @classmethod
    def from_entries(cls, entries: Iterable[ManifestEntry]) -> "ClassTable":
        kinds: dict[str, str] = {}
        for entry in entries:
            for name in entry.labels:
                prior = kinds.get(name)
                if prior is None:
                    kinds[name] = entry.class_kind
                elif prior != entry.class_kind:
                    raise InvalidManifest(
                        f"class {name!r} appears with conflicting kinds "
                        f"({prior!r} vs {entry.class_kind!r})"
                    )
        names = sorted(kinds)
        return cls(names, [kinds[n] for n in names])

    def __len__(self) -> int:
        return len(self._names)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ClassTable)
            and self._names == other._names
            and self._kinds == other._kinds
        )

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def kinds(self) -> tuple[str, ...]:
        return self._kinds

    def id_for(self, name: str) -> int:
        return self._ids[name]

    def name_of(self, class_id: int) -> str:
        return self._names[class_id]

    def kind_of(self, class_id: int) -> str:
        return self._kinds[class_id]


class VectorIndex:
    """Immutable collection of unit vectors with aligned labels and ids.

    Finalized at construction: the backing arrays are marked read-only and
    no mutating operations exist, so an index is safe to share across any
    number of concurrent query workers.
    """

    def __init__(self, vectors, labels, record_ids, class_table: ClassTable):
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        labels = np.ascontiguousarray(labels, dtype=np.uint32)
        record_ids = np.ascontiguousarray(record_ids, dtype=np.uint64)
        if vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {vectors.shape}")
        count = vectors.shape[0]
        if labels.shape != (count,) or record_ids.shape != (count,):
            raise ValueError("vectors, labels, and record_ids must have equal length")
        if count and labels.max(initial=0) >= len(class_table):
            raise ValueError("label id out of range for class table")
        if len(set(record_ids.tolist())) != count:
            raise InvalidManifest("record_ids must be unique within an index")
        vectors.setflags(write=False)
        labels.setflags(write=False)
        record_ids.setflags(write=False)
        self._vectors = vectors
        self._labels = labels
        self._record_ids = record_ids
        self._class_table = class_table
        self._positions: dict[int, int] | None = None

    @property
    def dimension(self) -> int:
        return self._vectors.shape[1]

    @property
    def count(self) -> int:
        return self._vectors.shape[0]

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def record_ids(self) -> np.ndarray:
        return self._record_ids

    @property
    def class_table(self) -> ClassTable:
        return self._class_table

    def _position_map(self) -> dict[int, int]:
        if self._positions is None:
            self._positions = {
                int(rid): pos for pos, rid in enumerate(self._record_ids.tolist())
            }
        return self._positions

    def position_of(self, record_id: int) -> int | None:
        return self._position_map().get(int(record_id))

    def label_of(self, record_id: int) -> int:
        pos = self.position_of(record_id)
        if pos is None:
            raise UnknownRecordId(f"record {record_id} is not in the index")
        return int(self._labels[pos])

    def labels_by_record(self) -> dict[int, int]:
        return {
            int(rid): int(lab)
            for rid, lab in zip(self._record_ids.tolist(), self._labels.tolist())
        }

    def class_counts(self) -> np.ndarray:
        return np.bincount(self._labels, minlength=len(self._class_table))


def single_label_id(entry: ManifestEntry, class_table: ClassTable) -> int:
    """Class id of an entry that must carry exactly one label."""
    if len(entry.labels) != 1:
        raise MultiLabelRecord(
            f"record {entry.record_id} has {len(entry.labels)} labels; "
            "a single label is required here (was the manifest prepared?)"
        )
    try:
        return class_table.id_for(entry.labels[0])
    except KeyError:
        raise InvalidManifest(
            f"record {entry.record_id}: label {entry.labels[0]!r} is not in the class table"
        ) from None


def build_index(
    embeddings: Iterable[EmbeddingRecord],
    manifest: Sequence[ManifestEntry],
    split_filter: str,
    class_table: ClassTable | None = None,
    dimension: int | None = None,
) -> VectorIndex:
    """Normalize and index every embedding whose manifest split matches.

    The class table defaults to one built from the *entire* manifest so that
    indexes and query sets derived from the same manifest share class ids.
    ``dimension`` is only needed when the filtered stream can be empty.

    Raises:
        UnknownRecordId: an embedding's record_id is not in the manifest.
        DimensionMismatch: vectors of differing length.
        ZeroVector / NonFiniteVector: degenerate embedding (record named).
        MultiLabelRecord: a selected record does not have exactly one label.
    """
    if split_filter not in SPLITS:
        raise ValueError(f"split_filter must be one of {SPLITS}, got {split_filter!r}")
    by_id: dict[int, ManifestEntry] = {}
    for entry in manifest:
        if entry.record_id in by_id:
            raise InvalidManifest(f"duplicate record_id {entry.record_id}")
        by_id[entry.record_id] = entry
    if class_table is None:
        class_table = ClassTable.from_entries(manifest)

    rows: list[np.ndarray] = []
    labels: list[int] = []
    record_ids: list[int] = []
    for rec in embeddings:
        entry = by_id.get(rec.record_id)
        if entry is None:
            raise UnknownRecordId(f"record {rec.record_id} is not in the manifest")
        vec = np.asarray(rec.vector, dtype=np.float32)
        if vec.ndim != 1:
            raise DimensionMismatch(
                f"record {rec.record_id}: expected a 1-D vector, got shape {vec.shape}"
            )
        if dimension is None:
            dimension = vec.size
        if vec.size != dimension:
            raise DimensionMismatch(
                f"record {rec.record_id}: vector length {vec.size} != dimension {dimension}"
            )
        if entry.split != split_filter:
            continue
        try:
            rows.append(l2_normalize(vec))
        except (ZeroVector, NonFiniteVector) as exc:
            raise type(exc)(f"record {rec.record_id}: {exc}") from None
        labels.append(single_label_id(entry, class_table))
        record_ids.append(rec.record_id)

    if dimension is None:
        raise ValueError("dimension is required when the embedding stream is empty")
    vectors = (
        np.vstack(rows) if rows else np.empty((0, dimension), dtype=np.float32)
    )
    return VectorIndex(vectors, labels, record_ids, class_table)
