"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Shapes, ranges or configuration values that violate an operation's contract."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class ChecksumError(IOError):
    """A checkpoint file failed its integrity check."""


class FingerprintMismatch(ValueError):
    """A checkpoint was written by a differently configured architecture."""


class ConfigError(ValueError):
    """Unknown keys or malformed values in a run configuration."""


class DataError(IOError):
    """Dataset content is missing or unusable."""
