"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shapes are inconsistent with the operation's contract."""


class GeometryError(ValueError):
    """Kernel/stride/padding geometry produces an invalid output size."""


class SpecError(ValueError):
    """A network specification is invalid (unknown variant, zero width, ...)."""


class FormatError(ValueError):
    """A binary or text file does not match its expected format/version."""


class DataError(Exception):
    """Dataset content is missing or malformed."""


class ConfigError(Exception):
    """A run configuration contains unknown keys or invalid values."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class UndefinedResultError(ValueError):
    """A metric is undefined for the given inputs (e.g. zero variance)."""
