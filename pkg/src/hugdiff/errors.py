"""Exception types raised across the package."""


class HugDiffError(Exception):
    """Base class for all package errors."""


class ShapeError(HugDiffError, ValueError):
    pass


class InvalidAttribute(HugDiffError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (index {index})")
        self.index = index


class NormalizationError(HugDiffError, ValueError):
    pass


class FormatError(HugDiffError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class InvalidGradient(HugDiffError, ValueError):
    pass


class EmptySurface(HugDiffError, ValueError):
    pass


class InsufficientPoints(HugDiffError, ValueError):
    pass


class TrainingDiverged(HugDiffError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class ConfigError(HugDiffError, ValueError):
    pass


class IngestError(HugDiffError, ValueError):
    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{path}: {message}")
        self.path = path


class EmptyDepth(HugDiffError, ValueError):
    pass


class MissingBackView(HugDiffError, LookupError):
    pass


class ScheduleError(HugDiffError, ValueError):
    pass


class SamplingDiverged(HugDiffError, RuntimeError):
    def __init__(self, message, timestep=None):
        super().__init__(message if timestep is None else f"{message} (timestep {timestep})")
        self.timestep = timestep


class NonFiniteFeatures(HugDiffError, ValueError):
    pass


class MissingCondition(HugDiffError, ValueError):
    pass


class StageError(HugDiffError, RuntimeError):
    """Wraps a component failure inside a composed pipeline with the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
