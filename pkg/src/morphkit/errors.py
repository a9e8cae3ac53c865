"""Exception types shared across morphkit modules."""


class MorphkitError(Exception):
    """Base class for all morphkit-specific errors."""


class ShapeError(MorphkitError, ValueError):
    """An array does not match the shape a contract requires."""


class DuplicateEntryError(MorphkitError):
    """An insert would overwrite an existing cache entry."""


class CacheFormatError(MorphkitError):
    """A cache file has a bad magic string or unsupported version."""


class CacheCorruptionError(CacheFormatError):
    """A cache file is truncated or internally inconsistent."""


class VlmParseError(MorphkitError, ValueError):
    """A VLM response is missing one of the required labels.

    Carries the raw response text for diagnostics.
    """

    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


class VlmClientError(MorphkitError):
    """The VLM endpoint could not be reached or returned garbage."""


class NumericalError(MorphkitError, ArithmeticError):
    """A numerical routine hit an ill-conditioned input beyond tolerance."""


class BackendError(MorphkitError):
    """A diffusion backend failed or is unavailable."""
