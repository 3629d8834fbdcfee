"""Exception hierarchy with stable machine-readable codes."""


class ExtractorError(Exception):
    code = "error"


class UnknownEncoder(ExtractorError):
    code = "unknown_encoder"


class UnreadableImage(ExtractorError):
    code = "unreadable_image"


class EncoderDimensionMismatch(ExtractorError):
    code = "encoder_dimension_mismatch"


class InvalidManifest(ExtractorError):
    code = "invalid_manifest"


class MissingInput(ExtractorError):
    code = "missing_input"
