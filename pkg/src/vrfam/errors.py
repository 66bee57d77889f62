"""Exceptions raised by the vrfam package."""


class VrfamError(Exception):
    """Base class for all package errors."""


class DimensionError(VrfamError, ValueError):
    """Operand shapes do not agree."""


class ConfigurationError(VrfamError, ValueError):
    """A model, generator, training or command configuration is invalid."""


class DegenerateBatchError(VrfamError):
    """Batch statistics cannot be computed from fewer than two values."""


class GraphError(VrfamError, RuntimeError):
    """The recorded computation graph cannot be traversed."""


class SessionParseError(VrfamError):
    """A session record could not be parsed.

    Parameters
    ----------
    path : str
        File that holds the broken record.
    line : int
        1-based line number of the record.
    message : str
        What is wrong with the record.
    """

    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class SessionValidationError(SessionParseError):
    """A session record parsed but violates the session schema rules."""


class DataError(VrfamError):
    """The data needed for an operation is missing or unusable."""


class EvaluationError(VrfamError, ValueError):
    """Metrics cannot be computed from the given scores."""


class ReportError(VrfamError):
    """Run results cannot be assembled into a report."""


class CheckpointError(VrfamError):
    """A checkpoint file is malformed or does not match its model."""
