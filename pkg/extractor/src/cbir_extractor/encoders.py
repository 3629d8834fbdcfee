"""Encoder plugins turning images into fixed-length feature vectors.

The registry maps encoder names to factories so model-specific adapters
can be added without touching the pipeline. The built-in "stub" encoder
is a seeded random projection of downsampled grayscale pixels: useless
as a representation, but deterministic, dependency-free, and enough to
exercise every byte of the extraction path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from PIL import Image

from .errors import UnknownEncoder


@dataclass(frozen=True)
class ExtractorSpec:
    """What to run: encoder name, preprocessing size, output geometry."""

    encoder: str = "stub"
    input_size: tuple[int, int] = (32, 32)  # (height, width)
    dim: int = 64
    batch_size: int = 16
    seed: int = 0
    device: str = "cpu"  # hint only; the stub ignores it

    def __post_init__(self):
        if not self.encoder:
            raise ValueError("encoder name must be non-empty")
        height, width = self.input_size
        if height < 1 or width < 1:
            raise ValueError(f"input_size must be positive, got {self.input_size}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


class Encoder(Protocol):
    def encode_batch(self, images: list[Image.Image]) -> np.ndarray: ...


class StubEncoder:
    """Seeded random projection of bilinearly downsampled grayscale pixels.

    The projection matrix depends only on (seed, input_size, dim), so the
    same spec maps the same image to the same vector on every run.
    """

    def __init__(self, spec: ExtractorSpec):
        self.spec = spec
        height, width = spec.input_size
        rng = np.random.default_rng(spec.seed)
        scale = 1.0 / math.sqrt(height * width)
        self._projection = (
            rng.standard_normal((height * width, spec.dim)) * scale
        ).astype(np.float32)

    def encode_batch(self, images: list[Image.Image]) -> np.ndarray:
        height, width = self.spec.input_size
        pixels = np.empty((len(images), height * width), dtype=np.float32)
        for i, image in enumerate(images):
            resized = image.convert("L").resize((width, height), Image.BILINEAR)
            pixels[i] = np.asarray(resized, dtype=np.float32).ravel() / 255.0
        return pixels @ self._projection


_REGISTRY: dict[str, Callable[[ExtractorSpec], Encoder]] = {}


def register_encoder(name: str, factory: Callable[[ExtractorSpec], Encoder]) -> None:
    _REGISTRY[name] = factory


def create_encoder(spec: ExtractorSpec) -> Encoder:
    factory = _REGISTRY.get(spec.encoder)
    if factory is None:
        known = ", ".join(sorted(_REGISTRY)) or "none"
        raise UnknownEncoder(
            f"encoder {spec.encoder!r} is not registered (available: {known})"
        )
    return factory(spec)


register_encoder("stub", StubEncoder)
