"""Exception hierarchy shared by all defa modules."""

from __future__ import annotations


class DefaError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(DefaError, ValueError):
    """A loaded or constructed object violates one of its invariants.

    ``field`` carries a dotted path to the offending entry (e.g. ``markups.pts68``).
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class DimensionError(ValidationError):
    """Array shapes or parameter lengths disagree with the model."""


class ParameterError(DefaError, ValueError):
    pass


class DegenerateCameraError(DefaError, ValueError):
    """Projection rows are (near) zero or parallel."""


class NoCandidatesError(DefaError, ValueError):
    pass


class EmptyBlockError(DefaError, ValueError):
    pass


class InitializationError(DefaError, RuntimeError):
    pass
