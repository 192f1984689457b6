"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: usage errors -> 1, data/validation
errors -> 2, numerical failures -> 3.
"""


class CdiscoError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(CdiscoError):
    """Bad command-line arguments or flag combinations."""


class ShapeError(CdiscoError, ValueError):
    """Tensor rank or dimension mismatch."""


class ValidationError(CdiscoError, ValueError):
    """Data violates a documented invariant or precondition."""


class FormatError(CdiscoError, ValueError):
    """On-disk container is malformed."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(FormatError):
    """Container version is not supported."""


class TruncatedPayloadError(FormatError):
    """File ends before the declared payload is complete."""


class NumericalError(CdiscoError, ArithmeticError):
    """An iterative numerical procedure failed to converge or diverged."""
