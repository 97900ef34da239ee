"""Exception types shared across the package."""


class FneError(Exception):
    """Base class for all errors raised by this package."""


class MalformedInputError(FneError, ValueError):
    pass


class DegenerateEmbeddingError(FneError, ValueError):
    """A zero-norm (or non-finite) vector reached a similarity computation."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class NonFiniteError(FneError, ValueError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class TrackerNotReady(FneError, RuntimeError):
    """Raised when similarity statistics are requested before warm-up ends."""


class FormatError(FneError):
    """Binary file could not be decoded.

    ``code`` distinguishes the failure: ``bad_magic``, ``bad_version``,
    ``truncated`` or ``inconsistent``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
