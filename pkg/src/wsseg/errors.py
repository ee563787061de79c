"""Exception types shared across the pipeline."""


class WssegError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(WssegError, ValueError):
    pass


class ParseError(WssegError, ValueError):
    pass


class BoundsError(WssegError, ValueError):
    pass


class SchemaError(WssegError, ValueError):
    pass


class DataError(WssegError, ValueError):
    pass


class ShapeError(WssegError, ValueError):
    pass


class RangeError(WssegError, IndexError):
    pass


class ValidationError(WssegError, ValueError):
    pass


class LossError(WssegError, ValueError):
    pass


class UndefinedMetricError(WssegError, ValueError):
    pass


class IoError(WssegError, OSError):
    pass


class CheckpointError(WssegError):
    pass


class TrainingError(WssegError, RuntimeError):
    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch


class DependencyError(WssegError):
    pass


class StaleArtifactError(WssegError):
    pass
