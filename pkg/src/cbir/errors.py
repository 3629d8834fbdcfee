"""Exception hierarchy for the retrieval engine.

Every error carries a stable ``code`` used by the CLI to emit
machine-readable error records.
"""


class CbirError(Exception):
    code = "error"


class InvalidManifest(CbirError):
    code = "invalid_manifest"


class MissingHash(CbirError):
    code = "missing_hash"


class MissingPatientId(CbirError):
    code = "missing_patient_id"


class ZeroVector(CbirError):
    code = "zero_vector"


class NonFiniteVector(CbirError):
    code = "non_finite_vector"


class DimensionMismatch(CbirError):
    code = "dimension_mismatch"


class UnknownRecordId(CbirError):
    code = "unknown_record_id"


class MultiLabelRecord(CbirError):
    code = "multi_label_record"


class CorruptFile(CbirError):
    code = "corrupt_file"


class NormViolation(CbirError):
    code = "norm_violation"


class EmptyIndex(CbirError):
    code = "empty_index"


class InsufficientHits(CbirError):
    code = "insufficient_hits"


class EmptyQuerySet(CbirError):
    code = "empty_query_set"


class EmptyValidationSet(CbirError):
    code = "empty_validation_set"


class KTooLarge(CbirError):
    code = "k_too_large"


class SingleClass(CbirError):
    code = "single_class"


class NonFiniteLoss(CbirError):
    """Training diverged. Carries the history recorded up to the failure."""

    code = "non_finite_loss"

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class LengthMismatch(CbirError):
    code = "length_mismatch"


class NoPositives(CbirError):
    code = "no_positives"


class InsufficientQueries(CbirError):
    code = "insufficient_queries"


class MissingInput(CbirError):
    code = "missing_input"
