"""Exception types shared across the package."""


class MagvlaqError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MagvlaqError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateInputError(MagvlaqError):
    """Input is structurally valid but numerically degenerate (empty, zero-norm, ...)."""


class ConfigurationError(MagvlaqError):
    """A configuration value or combination of values is invalid."""


class ContractError(MagvlaqError):
    """An operation was called in a way that violates its contract."""


class DivergenceError(MagvlaqError):
    """A numerical computation produced non-finite values."""


class TokenFileError(MagvlaqError):
    """Base class for token-container file problems."""


class BadMagicError(TokenFileError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(TokenFileError):
    """File declares a container version this build cannot read."""


class TruncatedFileError(TokenFileError):
    """File ends before the data its header promises."""


class CorruptContainerError(TokenFileError):
    """Header or blob layout is internally inconsistent (overlaps, bad offsets)."""


class DatasetValidationError(MagvlaqError):
    """A dataset violates a structural invariant; message names the entry."""
