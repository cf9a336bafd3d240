"""Exception hierarchy shared across the package."""


class XWDError(Exception):
    """Base class for all package errors."""


class ValidationError(XWDError, ValueError):
    """Invalid input data or configuration."""


# ingestion
class MissingMetadata(ValidationError):
    pass


class InconsistentShape(ValidationError):
    pass


class TooFewSlices(ValidationError):
    pass


class EmptyAfterTrim(ValidationError):
    pass


class InvalidBand(ValidationError):
    pass


class EmptyPartition(ValidationError):
    pass


class CorruptVolume(ValidationError):
    pass


# windowing
class EmptyTrainingSet(ValidationError):
    pass


class LeakageError(XWDError, TypeError):
    """A fit was attempted on a partition that is not allowed to provide statistics."""


# model
class InvalidConfig(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class CorruptCheckpoint(XWDError):
    pass


# training
class Divergence(XWDError, RuntimeError):
    pass


class EmptyMetrics(ValidationError):
    pass


class TeacherNotFrozen(XWDError):
    pass


class WindowSetMismatch(ValidationError):
    pass


# ensemble
class MissingWindowModel(ValidationError):
    pass


class DegenerateLabels(ValidationError):
    pass


class ProvenanceMismatch(ValidationError):
    pass


# analysis
class SingleClass(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class UnknownLayer(ValidationError):
    pass


# orchestrator
class ConfigInvalid(ValidationError):
    pass


class StageFailure(XWDError):
    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
