"""Exception types shared across the package.

Everything user-input related derives from ValueError so callers (and the
CLI) can treat "bad data" uniformly; genuine bugs surface as ordinary
exceptions and are never wrapped.
"""


class ShapeError(ValueError):
    """An array had the wrong rank, size, or an incompatible pairing."""


class DomainError(ValueError):
    """A numeric argument was outside the mathematical domain of an op."""


class ConfigError(ValueError):
    """A training/evaluation configuration failed validation."""


class FormatError(ValueError):
    """A serialized file (checkpoint, bitstream, CSV, config) is malformed."""


class BitstreamError(FormatError):
    """A bitstream is truncated, corrupt, or mismatched with its model."""
