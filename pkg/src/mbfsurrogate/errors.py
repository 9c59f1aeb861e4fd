"""Exception types shared across the package."""


class PreconditionError(ValueError):
    """An input violated a documented precondition or type invariant."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class FormatError(ValueError):
    """Base class for malformed or inconsistent files."""


class MagicMismatchError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class NonFiniteValueError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass
