"""Exception types raised across the pipeline."""

from __future__ import annotations


class VTBRError(Exception):
    """Base class for all pipeline errors."""


class AnnotationParseError(VTBRError, ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class SchemaViolationError(VTBRError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class EmptyInputError(VTBRError, ValueError):
    pass


class ConsistencyError(VTBRError, ValueError):
    pass


class TemplateError(VTBRError, ValueError):
    pass


class LengthMismatchError(VTBRError, ValueError):
    pass


class RenderError(VTBRError, ValueError):
    pass


class SplitError(VTBRError, ValueError):
    pass


class DimensionError(VTBRError, ValueError):
    pass


class CaptionLengthError(VTBRError, ValueError):
    pass


class ScheduleRangeError(VTBRError, ValueError):
    pass


class TrainingDivergenceError(VTBRError, RuntimeError):
    pass


class SamplingError(VTBRError, ValueError):
    pass


class PreconditionError(VTBRError, ValueError):
    pass


class ProtocolError(VTBRError, ValueError):
    pass


class CheckpointCorruptError(VTBRError, IOError):
    pass


class CheckpointVersionError(VTBRError, IOError):
    pass


class ConfigError(VTBRError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
