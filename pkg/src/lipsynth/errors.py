"""Shared exception types."""


class LipsynthError(Exception):
    """Base class for all package errors."""


class ValidationError(LipsynthError):
    """An object or file violates a declared invariant. Message names the field."""


class FormatError(LipsynthError):
    """A file could not be parsed as its declared format."""


class ContractError(LipsynthError):
    """A pluggable component (adapter, recognizer) broke its declared contract."""


class UnknownLanguageError(LipsynthError):
    """A language tag is not registered with the model/corpus at hand."""


class MetricUndefined(LipsynthError):
    """The requested metric has no defined value for this input (e.g. constant ranks)."""


class DivergenceError(LipsynthError):
    """Training loss became non-finite. Carries the last finite checkpoint."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
