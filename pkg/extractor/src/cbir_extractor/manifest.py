"""Reader/writer for the manifest CSV contract shared with the store.

Columns: record_id, source_path, labels (pipe-joined), dataset, split,
patient_id, content_hash, class_kind. The extractor treats everything
except record_id and source_path as opaque pass-through text; semantic
validation (splits, label sets, hash format) is the consumer's job.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import InvalidManifest

COLUMNS = (
    "record_id",
    "source_path",
    "labels",
    "dataset",
    "split",
    "patient_id",
    "content_hash",
    "class_kind",
)


@dataclass(frozen=True)
class ManifestRow:
    record_id: int
    source_path: str
    labels: str
    dataset: str
    split: str
    patient_id: str
    content_hash: str
    class_kind: str

    def with_hash(self, content_hash: str) -> "ManifestRow":
        return replace(self, content_hash=content_hash)


def read_manifest(path: Path) -> list[ManifestRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(COLUMNS):
            raise InvalidManifest(
                f"manifest header must be {','.join(COLUMNS)}, got {header}"
            )
        rows = []
        seen: set[int] = set()
        for line_no, raw in enumerate(reader, start=2):
            if len(raw) != len(COLUMNS):
                raise InvalidManifest(
                    f"line {line_no}: expected {len(COLUMNS)} fields, got {len(raw)}"
                )
            try:
                record_id = int(raw[0])
            except ValueError:
                raise InvalidManifest(
                    f"line {line_no}: record_id {raw[0]!r} is not an integer"
                ) from None
            if record_id < 0:
                raise InvalidManifest(f"line {line_no}: record_id must be >= 0")
            if record_id in seen:
                raise InvalidManifest(f"line {line_no}: duplicate record_id {record_id}")
            seen.add(record_id)
            if not raw[1]:
                raise InvalidManifest(f"line {line_no}: source_path is empty")
            rows.append(ManifestRow(record_id, *raw[1:]))
        return rows


def write_manifest(path: Path, rows: list[ManifestRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.record_id,
                    row.source_path,
                    row.labels,
                    row.dataset,
                    row.split,
                    row.patient_id,
                    row.content_hash,
                    row.class_kind,
                ]
            )
