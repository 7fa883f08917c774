"""Exception types shared across the package.

Each maps to one CLI exit code (see ``kwloc.cli``).
"""


class KwlocError(Exception):
    """Base class for all package errors."""


class ConfigError(KwlocError, ValueError):
    """Invalid configuration: bad hyperparameter, shape mismatch, unknown name."""


class InputError(KwlocError, ValueError):
    """Invalid call-time input, e.g. a keyword index out of range or a too-short utterance."""


class FormatError(KwlocError, ValueError):
    """A file on disk does not follow its documented layout."""

    def __init__(self, message, *, offset=None, line=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.line = line
        self.path = path


class IncompatibleMethodError(KwlocError):
    """A localisation method was requested for an architecture that cannot support it."""


class TrainingDiverged(KwlocError, FloatingPointError):
    """Loss or gradients became non-finite during training."""


class InvariantViolation(KwlocError, AssertionError):
    """An evaluation report broke one of its ordering guarantees."""
