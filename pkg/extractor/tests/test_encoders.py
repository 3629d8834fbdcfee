"""Stub encoder and registry tests."""

import numpy as np
import pytest
from PIL import Image

from cbir_extractor.encoders import (
    ExtractorSpec,
    StubEncoder,
    create_encoder,
    register_encoder,
)
from cbir_extractor.errors import UnknownEncoder

from imagegen import class_image


class TestExtractorSpec:
    def test_defaults(self):
        spec = ExtractorSpec()
        assert spec.encoder == "stub"
        assert spec.input_size == (32, 32)
        assert spec.dim == 64

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"encoder": ""},
            {"input_size": (0, 32)},
            {"input_size": (32, -1)},
            {"dim": 0},
            {"batch_size": 0},
        ],
    )
    def test_invalid_values_rejected(self, kwargs):
        with pytest.raises(ValueError):
            ExtractorSpec(**kwargs)


class TestStubEncoder:
    def test_same_spec_gives_identical_vectors(self):
        images = [class_image(0, i) for i in range(4)]
        a = StubEncoder(ExtractorSpec(seed=3)).encode_batch(images)
        b = StubEncoder(ExtractorSpec(seed=3)).encode_batch(images)
        np.testing.assert_array_equal(a, b)
        assert a.dtype == np.float32
        assert a.shape == (4, 64)

    def test_seed_changes_projection(self):
        images = [class_image(0, 0)]
        a = StubEncoder(ExtractorSpec(seed=0)).encode_batch(images)
        b = StubEncoder(ExtractorSpec(seed=1)).encode_batch(images)
        assert not np.array_equal(a, b)

    def test_input_size_and_dim_honored(self):
        spec = ExtractorSpec(input_size=(8, 12), dim=5)
        out = StubEncoder(spec).encode_batch([class_image(1, 7)])
        assert out.shape == (1, 5)

    def test_mixed_source_sizes_and_modes(self):
        # RGB and oddly sized inputs all pass through resize + grayscale
        rgb = Image.merge("RGB", [class_image(0, 1)] * 3)
        tall = class_image(0, 2).resize((20, 70))
        out = StubEncoder(ExtractorSpec()).encode_batch([rgb, tall])
        assert out.shape == (2, 64)
        assert np.isfinite(out).all()

    def test_distinct_images_get_distinct_vectors(self):
        out = StubEncoder(ExtractorSpec()).encode_batch(
            [class_image(0, 1), class_image(0, 2)]
        )
        assert not np.array_equal(out[0], out[1])

    def test_classes_separate_in_feature_space(self):
        # bright-top vs bright-bottom project to distinct clusters
        images0 = [class_image(0, i) for i in range(6)]
        images1 = [class_image(1, 100 + i) for i in range(6)]
        out = StubEncoder(ExtractorSpec()).encode_batch(images0 + images1)
        unit = out / np.linalg.norm(out, axis=1, keepdims=True)
        within = unit[:6] @ unit[:6].T
        across = unit[:6] @ unit[6:].T
        assert within.min() > across.max()


class TestRegistry:
    def test_stub_is_registered(self):
        assert isinstance(create_encoder(ExtractorSpec()), StubEncoder)

    def test_unknown_encoder(self):
        with pytest.raises(UnknownEncoder, match="no_such"):
            create_encoder(ExtractorSpec(encoder="no_such"))

    def test_custom_registration(self):
        class Flat:
            def __init__(self, spec):
                self.spec = spec

            def encode_batch(self, images):
                return np.zeros((len(images), self.spec.dim), dtype=np.float32)

        register_encoder("flat-test", Flat)
        try:
            encoder = create_encoder(ExtractorSpec(encoder="flat-test", dim=3))
            out = encoder.encode_batch([class_image(0, 0)])
            np.testing.assert_array_equal(out, np.zeros((1, 3), np.float32))
        finally:
            from cbir_extractor import encoders

            encoders._REGISTRY.pop("flat-test")
