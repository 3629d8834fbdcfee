"""On-disk formats: embedding files, index files, and manifest CSVs.

All binary layouts are little-endian. Both files share a 20-byte header:
magic ``CBIR``, format version u32 (currently 1), dimension u32, record
count u64. An embedding file follows with interleaved records (record_id
u64 + D float32 values, possibly unnormalized). An index file follows with
the raw M x D float32 vector block and then a metadata block prefixed by
its u64 byte length: class table (u32 class count; per class u16 name
length, UTF-8 name bytes, u8 kind flag), M u32 labels, M u64 record ids.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFile, InvalidManifest, NormViolation
from .store import (
    CLASS_KINDS,
    SPLITS,
    UNIT_NORM_TOL,
    ClassTable,
    EmbeddingRecord,
    ManifestEntry,
    VectorIndex,
)

MAGIC = b"CBIR"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIIQ")

MANIFEST_COLUMNS = (
    "record_id",
    "source_path",
    "labels",
    "dataset",
    "split",
    "patient_id",
    "content_hash",
    "class_kind",
)

_HEX_DIGITS = frozenset("0123456789abcdef")


def _record_dtype(dimension: int) -> np.dtype:
    return np.dtype([("record_id", "<u8"), ("vector", "<f4", (dimension,))])


def _read_header(data: bytes, path) -> tuple[int, int]:
    if len(data) < _HEADER.size:
        raise CorruptFile(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, dimension, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptFile(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CorruptFile(f"{path}: unsupported format version {version}")
    if dimension < 1:
        raise CorruptFile(f"{path}: dimension must be >= 1, got {dimension}")
    return dimension, count


@dataclass(frozen=True)
class EmbeddingFile:
    """Decoded embedding file: parallel id and vector arrays."""

    dimension: int
    record_ids: np.ndarray
    vectors: np.ndarray

    @property
    def count(self) -> int:
        return int(self.record_ids.shape[0])

    def records(self):
        """Yield each row as an EmbeddingRecord, in file order."""
        for i in range(self.count):
            yield EmbeddingRecord(int(self.record_ids[i]), self.vectors[i])


def write_embedding_file(path, record_ids, vectors) -> None:
    """Serialize parallel id/vector arrays in the interleaved binary layout."""
    record_ids = np.ascontiguousarray(record_ids, dtype=np.uint64)
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    if vectors.ndim != 2:
        raise ValueError(f"vectors must be 2-D, got shape {vectors.shape}")
    count, dimension = vectors.shape
    if record_ids.shape != (count,):
        raise ValueError("record_ids and vectors must have equal length")
    if dimension < 1:
        raise ValueError("dimension must be >= 1")
    rows = np.empty(count, dtype=_record_dtype(dimension))
    rows["record_id"] = record_ids
    rows["vector"] = vectors
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, dimension, count))
        fh.write(rows.tobytes())


def read_embedding_file(path) -> EmbeddingFile:
    """Parse an embedding file, validating header and exact length.

    Raises:
        CorruptFile: bad magic, unsupported version, or truncation.
    """
    data = Path(path).read_bytes()
    dimension, count = _read_header(data, path)
    dtype = _record_dtype(dimension)
    expected = _HEADER.size + count * dtype.itemsize
    if len(data) != expected:
        raise CorruptFile(
            f"{path}: expected {expected} bytes for {count} records of "
            f"dimension {dimension}, found {len(data)}"
        )
    rows = np.frombuffer(data, dtype=dtype, count=count, offset=_HEADER.size)
    record_ids = np.ascontiguousarray(rows["record_id"])
    vectors = np.ascontiguousarray(rows["vector"]).reshape(count, dimension)
    return EmbeddingFile(dimension, record_ids, vectors)


def _encode_class_table(table: ClassTable) -> bytes:
    parts = [struct.pack("<I", len(table))]
    for name, kind in zip(table.names, table.kinds):
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"class name too long to serialize: {name[:32]!r}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", CLASS_KINDS.index(kind)))
    return b"".join(parts)


def _decode_class_table(buf: bytes, offset: int, path) -> tuple[ClassTable, int]:
    try:
        (n_classes,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        names: list[str] = []
        kinds: list[str] = []
        for _ in range(n_classes):
            (name_len,) = struct.unpack_from("<H", buf, offset)
            offset += 2
            if offset + name_len + 1 > len(buf):
                raise struct.error("class table runs past metadata block")
            names.append(buf[offset : offset + name_len].decode("utf-8"))
            offset += name_len
            kind_flag = buf[offset]
            offset += 1
            if kind_flag >= len(CLASS_KINDS):
                raise CorruptFile(f"{path}: unknown class kind flag {kind_flag}")
            kinds.append(CLASS_KINDS[kind_flag])
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: malformed class table ({exc})") from None
    return ClassTable(names, kinds), offset


def save_index(index: VectorIndex, path) -> None:
    """Persist a finalized index: header, raw vectors, metadata block."""
    meta = b"".join(
        (
            _encode_class_table(index.class_table),
            index.labels.astype("<u4").tobytes(),
            index.record_ids.astype("<u8").tobytes(),
        )
    )
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, index.dimension, index.count))
        fh.write(index.vectors.astype("<f4", copy=False).tobytes())
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)


def _spot_check_norms(vectors: np.ndarray, path) -> None:
    count = vectors.shape[0]
    if count == 0:
        return
    # Deterministic sample: up to 100 evenly spaced rows.
    idx = np.unique(np.linspace(0, count - 1, num=min(count, 100)).astype(np.intp))
    norms = np.sqrt(np.einsum("ij,ij->i", vectors[idx], vectors[idx], dtype=np.float64))
    worst = int(np.argmax(np.abs(norms - 1.0)))
    if abs(norms[worst] - 1.0) > UNIT_NORM_TOL:
        raise NormViolation(
            f"{path}: stored vector at row {int(idx[worst])} has norm "
            f"{norms[worst]:.8f}, outside 1 +/- {UNIT_NORM_TOL}"
        )


def load_index(path) -> VectorIndex:
    """Load a persisted index, validating structure and unit norms.

    Norm validation spot-checks up to 100 evenly spaced rows.

    Raises:
        CorruptFile: bad magic/version, truncation, or trailing bytes.
        NormViolation: a sampled vector is not unit norm within 1e-5.
    """
    data = Path(path).read_bytes()
    dimension, count = _read_header(data, path)
    vec_bytes = count * dimension * 4
    meta_len_at = _HEADER.size + vec_bytes
    if len(data) < meta_len_at + 8:
        raise CorruptFile(f"{path}: truncated before the metadata block")
    vectors = np.frombuffer(
        data, dtype="<f4", count=count * dimension, offset=_HEADER.size
    ).reshape(count, dimension)
    (meta_len,) = struct.unpack_from("<Q", data, meta_len_at)
    meta_end = meta_len_at + 8 + meta_len
    if len(data) != meta_end:
        raise CorruptFile(
            f"{path}: metadata block declares {meta_len} bytes but "
            f"{len(data) - meta_len_at - 8} follow"
        )
    table, offset = _decode_class_table(data, meta_len_at + 8, path)
    arrays_bytes = count * 4 + count * 8
    if meta_end - offset != arrays_bytes:
        raise CorruptFile(
            f"{path}: expected {arrays_bytes} bytes of labels/ids after the "
            f"class table, found {meta_end - offset}"
        )
    labels = np.frombuffer(data, dtype="<u4", count=count, offset=offset)
    offset += count * 4
    record_ids = np.frombuffer(data, dtype="<u8", count=count, offset=offset)
    _spot_check_norms(vectors, path)
    return VectorIndex(vectors, labels, record_ids, table)


def _entry_to_row(entry: ManifestEntry) -> list[str]:
    return [
        str(entry.record_id),
        entry.source_path,
        "|".join(entry.labels),
        entry.dataset,
        entry.split,
        entry.patient_id or "",
        entry.content_hash or "",
        entry.class_kind,
    ]


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for entry in entries:
            writer.writerow(_entry_to_row(entry))


def _parse_hash(raw: str, line_no: int) -> str | None:
    if not raw:
        return None
    if len(raw) != 64 or not set(raw) <= _HEX_DIGITS:
        raise InvalidManifest(
            f"line {line_no}: content_hash must be 64 lowercase hex chars, got {raw!r}"
        )
    return raw


def read_manifest(path) -> list[ManifestEntry]:
    """Parse a manifest CSV, enforcing the exact column header.

    Raises:
        InvalidManifest: wrong header, malformed row, bad enum value, or
            non-hex content_hash.
    """
    entries: list[ManifestEntry] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidManifest(f"{path}: empty manifest file") from None
        if tuple(header) != MANIFEST_COLUMNS:
            raise InvalidManifest(
                f"{path}: header {header!r} does not match {list(MANIFEST_COLUMNS)!r}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise InvalidManifest(
                    f"line {line_no}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}"
                )
            rid, source_path, labels, dataset, split, patient, digest, kind = row
            try:
                record_id = int(rid)
            except ValueError:
                raise InvalidManifest(
                    f"line {line_no}: record_id must be an integer, got {rid!r}"
                ) from None
            if split not in SPLITS:
                raise InvalidManifest(f"line {line_no}: bad split {split!r}")
            if kind not in CLASS_KINDS:
                raise InvalidManifest(f"line {line_no}: bad class_kind {kind!r}")
            entries.append(
                ManifestEntry(
                    record_id=record_id,
                    source_path=source_path,
                    labels=tuple(x for x in labels.split("|") if x),
                    dataset=dataset,
                    split=split,
                    patient_id=patient or None,
                    content_hash=_parse_hash(digest, line_no),
                    class_kind=kind,
                )
            )
    return entries
