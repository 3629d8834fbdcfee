"""Writer for the binary embedding file consumed by the vector store.

Layout (all little-endian): 4-byte magic "CBIR", u32 version (1), u32
dimension, u64 record count, then count interleaved records of u64
record_id followed by dimension float32 values. No padding anywhere.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CBIR"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


def write_embeddings(path: Path, record_ids: list[int], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype="<f4")
    if vectors.ndim != 2:
        raise ValueError(f"vectors must be 2-D, got shape {vectors.shape}")
    if len(record_ids) != vectors.shape[0]:
        raise ValueError(
            f"{len(record_ids)} record ids for {vectors.shape[0]} vectors"
        )
    dim = vectors.shape[1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dim, len(record_ids)))
        for rid, vec in zip(record_ids, vectors):
            fh.write(struct.pack("<Q", rid))
            fh.write(vec.tobytes())


def read_header(path: Path) -> tuple[int, int]:
    """(dimension, count) of an embedding file, with layout checks."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path} is shorter than the {_HEADER.size}-byte header")
    magic, version, dim, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"{path} has magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ValueError(f"{path} has version {version}, expected {VERSION}")
    expected = _HEADER.size + count * (8 + 4 * dim)
    if len(blob) != expected:
        raise ValueError(
            f"{path} holds {len(blob)} bytes, layout implies {expected}"
        )
    return dim, count
