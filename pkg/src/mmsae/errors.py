"""Exception types raised across the package.

Every error derives from :class:`MmsaeError` so callers (the CLI in
particular) can map whole families onto exit codes.
"""


class MmsaeError(Exception):
    """Base class for all package errors."""


class ConfigError(MmsaeError, ValueError):
    """Invalid or inconsistent configuration / arguments."""


class ArgumentError(ConfigError):
    pass


class DataError(MmsaeError, ValueError):
    """Input data is malformed (non-finite values, zero-norm rows, ...)."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class FormatError(DataError):
    """A binary file does not conform to its declared format."""


class ShapeError(DataError):
    pass


class PairingError(DataError):
    pass


class ManifestError(DataError):
    pass


class NumericError(MmsaeError, ArithmeticError):
    """Non-finite values appeared during optimization."""

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


class TrainingDiverged(NumericError):
    """Training loss became non-finite; carries the last finite parameters."""

    def __init__(self, message, last_good=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


class PreconditionError(MmsaeError, ValueError):
    pass


class ConsistencyError(MmsaeError, RuntimeError):
    """An internal invariant that should follow from the inputs failed."""


class GenerationError(MmsaeError, RuntimeError):
    pass
