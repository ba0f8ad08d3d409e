class CimLlmError(Exception):
    """Base class for every error raised by the toolbox."""


class ConfigError(CimLlmError):
    pass


class OutputExistsError(CimLlmError):
    """An output file exists and overwriting was not requested."""


# volume I/O

class VolumeIOError(CimLlmError):
    pass


class UnsupportedDatatypeError(VolumeIOError):
    pass


class UnsupportedFormatError(VolumeIOError):
    pass


class CorruptHeaderError(VolumeIOError):
    pass


class DimensionalityNot3DError(VolumeIOError):
    pass


class NonFiniteIntensityError(VolumeIOError):
    pass


class GeometryMismatchError(VolumeIOError):
    pass


class MissingRequiredModalityError(VolumeIOError):
    pass


class LabelVocabularyError(VolumeIOError):
    pass


class ManifestError(VolumeIOError):
    pass


# voxel analytics

class AnalyticsError(CimLlmError):
    pass


class EmptySourceError(AnalyticsError):
    pass


class EmptyMaskError(AnalyticsError):
    pass


# feature extraction

class FeatureError(CimLlmError):
    pass


class NoAtlasError(FeatureError):
    pass


class EmptyRegionError(FeatureError):
    pass


class MissingSequenceError(FeatureError):
    pass


# subject schema

class SchemaError(CimLlmError):
    pass


class NonFiniteValueError(SchemaError):
    pass


class UnknownGroupError(SchemaError):
    pass


class DocumentValidationError(SchemaError):
    pass


# LLM inference

class InferenceError(CimLlmError):
    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class InferenceTimeoutError(InferenceError):
    pass


class RateLimitedError(InferenceError):
    pass


class ServerError(InferenceError):
    pass


class AuthFailureError(InferenceError):
    pass


class MalformedResponseError(InferenceError):
    pass


# evaluation

class EvaluationError(CimLlmError):
    pass


class MissingGroundTruthError(EvaluationError):
    def __init__(self, message: str, subject_ids=()):
        super().__init__(message)
        self.subject_ids = list(subject_ids)


class EmptyCohortError(EvaluationError):
    pass


class ZeroTrialsError(EvaluationError):
    pass
