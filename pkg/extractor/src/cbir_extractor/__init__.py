"""Batch image feature extraction into the cbir embedding file format."""

from .embfile import read_header, write_embeddings
from .encoders import ExtractorSpec, StubEncoder, create_encoder, register_encoder
from .errors import (
    EncoderDimensionMismatch,
    ExtractorError,
    InvalidManifest,
    MissingInput,
    UnknownEncoder,
    UnreadableImage,
)
from .extract import ExtractionLog, run_extraction
from .manifest import ManifestRow, read_manifest, write_manifest

__version__ = "0.1.0"

__all__ = [
    "EncoderDimensionMismatch",
    "ExtractionLog",
    "ExtractorError",
    "ExtractorSpec",
    "InvalidManifest",
    "ManifestRow",
    "MissingInput",
    "StubEncoder",
    "UnknownEncoder",
    "UnreadableImage",
    "create_encoder",
    "read_header",
    "read_manifest",
    "register_encoder",
    "run_extraction",
    "write_embeddings",
    "write_manifest",
]
