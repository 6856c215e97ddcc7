"""
Exception hierarchy shared by the pipeline. The CLI maps these onto exit codes.
"""
from typing import Optional


class UPRecError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(UPRecError):
    pass


class DataError(UPRecError):
    """Input data is malformed, missing, or too sparse for the requested operation."""


class ArtifactError(DataError):
    """A serialized artifact has the wrong magic, an unsupported version or a bad hash."""


class TrainingDivergedError(UPRecError):
    """
    Raised when a loss or gradient stops being finite.
    Carries the last checkpoint that was written before the failure.
    """

    def __init__(self, message: str, last_checkpoint: Optional[str] = None, parameter: Optional[str] = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.parameter = parameter
