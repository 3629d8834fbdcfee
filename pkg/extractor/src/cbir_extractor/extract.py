"""Manifest-driven extraction pipeline.

Reads a manifest, loads and encodes every referenced image in batches,
and writes two artifacts: the binary embedding file (records in manifest
order) and an updated manifest whose content_hash column is filled with
the sha256 of each image's raw bytes. Unreadable images abort the run by
default; with skip_unreadable they are logged and dropped from both
outputs, so the embedding count always matches the written manifest.
"""

from __future__ import annotations

import hashlib
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .embfile import write_embeddings
from .encoders import ExtractorSpec, create_encoder
from .errors import EncoderDimensionMismatch, UnreadableImage
from .manifest import ManifestRow, read_manifest, write_manifest


@dataclass(frozen=True)
class ExtractionLog:
    total_rows: int
    extracted: int
    failures: tuple[tuple[int, str, str], ...]  # (record_id, source_path, reason)

    def as_dict(self) -> dict:
        return {
            "total_rows": self.total_rows,
            "extracted": self.extracted,
            "failures": [
                {"record_id": rid, "source_path": path, "reason": reason}
                for rid, path, reason in self.failures
            ],
        }


def _load_one(images_root: Path, row: ManifestRow):
    """(row, sha256 hex, decoded image) or (row, reason) on failure."""
    path = images_root / row.source_path
    try:
        data = path.read_bytes()
        image = Image.open(io.BytesIO(data))
        image.load()
    except OSError as exc:
        return row, f"{path}: {exc}"
    return row, hashlib.sha256(data).hexdigest(), image


def _batches(rows: list[ManifestRow], size: int):
    for start in range(0, len(rows), size):
        yield rows[start : start + size]


def run_extraction(
    manifest_path: Path,
    images_root: Path,
    spec: ExtractorSpec,
    out_path: Path,
    manifest_out: Path,
    skip_unreadable: bool = False,
    loader_threads: int = 1,
) -> ExtractionLog:
    rows = read_manifest(manifest_path)
    encoder = create_encoder(spec)

    kept_rows: list[ManifestRow] = []
    blocks: list[np.ndarray] = []
    failures: list[tuple[int, str, str]] = []
    pool = (
        ThreadPoolExecutor(max_workers=loader_threads) if loader_threads > 1 else None
    )
    try:
        for batch in _batches(rows, spec.batch_size):
            load = (lambda r: _load_one(images_root, r))
            loaded = list(pool.map(load, batch)) if pool else [load(r) for r in batch]
            images: list[Image.Image] = []
            for item in loaded:
                if len(item) == 2:
                    row, reason = item
                    if not skip_unreadable:
                        raise UnreadableImage(reason)
                    failures.append((row.record_id, row.source_path, reason))
                    continue
                row, digest, image = item
                kept_rows.append(row.with_hash(digest))
                images.append(image)
            if not images:
                continue
            vectors = np.asarray(encoder.encode_batch(images), dtype=np.float32)
            if vectors.ndim != 2 or vectors.shape != (len(images), spec.dim):
                raise EncoderDimensionMismatch(
                    f"encoder {spec.encoder!r} returned shape {vectors.shape}, "
                    f"expected ({len(images)}, {spec.dim})"
                )
            blocks.append(vectors)
    finally:
        if pool:
            pool.shutdown()

    stacked = (
        np.vstack(blocks) if blocks else np.empty((0, spec.dim), dtype=np.float32)
    )
    write_embeddings(out_path, [r.record_id for r in kept_rows], stacked)
    write_manifest(manifest_out, kept_rows)
    return ExtractionLog(
        total_rows=len(rows),
        extracted=len(kept_rows),
        failures=tuple(failures),
    )
