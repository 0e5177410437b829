"""
Exception hierarchy shared by every OptiStop module.

Each class carries the exit code the command-line runner maps it to, so the
CLI can fail gracefully with a single meaningful message.
"""


class OptiStopError(Exception):
    """Base class for all expected failures."""

    exit_code = 1


class ConfigurationError(OptiStopError):
    """Invalid configuration values or a model unsuited to the requested stage."""

    exit_code = 2


class InputError(OptiStopError, ValueError):
    """Bad arguments handed to a library operation."""

    exit_code = 2


class ArtifactMismatchError(ConfigurationError):
    """An artifact was built for a different configuration, horizon, grid size or model."""

    exit_code = 3


class MissingArtifactError(OptiStopError):
    """A required artifact is absent."""

    exit_code = 3

    def __init__(self, path, command: str):
        self.path = path
        self.command = command
        super().__init__(f"Missing artifact {path}. Run `python app.py {command}` first.")


class ArtifactFormatError(OptiStopError):
    """Unreadable artifact: wrong magic bytes, unsupported version or truncated payload."""

    exit_code = 3


class NumericalError(OptiStopError):
    """Non-finite values produced during simulation or solving."""

    exit_code = 4

    def __init__(self, message: str, index: int | None = None):
        self.index = index
        super().__init__(message if index is None else f"{message} (at index {index})")


class DomainError(OptiStopError, ValueError):
    """Argument outside the mathematical domain of an operation."""

    exit_code = 4


class RangeError(OptiStopError, IndexError):
    """Time or stage outside the simulated or solved range."""

    exit_code = 4


class StageError(OptiStopError):
    """A pipeline stage failed; wraps the original error and names the stage."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"Stage '{stage}' failed: {cause}")
