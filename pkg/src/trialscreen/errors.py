"""Exception hierarchy shared across the pipeline.

The CLI maps these to exit codes: validation problems exit 2, backend
failures exit 3, incomplete runs exit 4. Pure-function argument errors
raise plain ValueError.
"""


class ScreeningError(Exception):
    """Base class for all trialscreen errors."""


class ValidationError(ScreeningError):
    """Bad configuration or input that fails pre-run validation."""


class FormatError(ScreeningError):
    """A file does not conform to its documented layout."""


class SchemaError(ScreeningError):
    """Structurally valid input violating a content contract (e.g. labels)."""


class BackendError(ScreeningError):
    """A remote embedding / NER / generation backend failed."""

    def __init__(self, message, status=None, body=None):
        super().__init__(message)
        self.status = status
        self.body = body


class StaleIndexError(ScreeningError):
    """Persisted index fingerprints do not match the current configuration."""


class CoverageError(ScreeningError):
    """Verdicts do not cover the gold (patient, criterion) grid exactly once."""

    def __init__(self, message, missing=(), duplicated=()):
        super().__init__(message)
        self.missing = list(missing)
        self.duplicated = list(duplicated)


class IncompleteRunError(ScreeningError):
    """A run manifest is unfinished and cannot be scored."""
