"""Exception types shared across the package."""


class CliqueNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CliqueNetError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class InputError(CliqueNetError, ValueError):
    """Operation input values are out of their valid domain."""


class UsageError(CliqueNetError, RuntimeError):
    """An API was called in a way its contract forbids."""


class ConfigError(CliqueNetError, ValueError):
    """A model configuration field failed validation."""


class FormatError(CliqueNetError, ValueError):
    """An on-disk file does not match its expected binary/text format."""


class CompatibilityError(CliqueNetError, ValueError):
    """A checkpoint does not match the model it is being loaded into."""


class TrainingDiverged(CliqueNetError, RuntimeError):
    """Training produced a non-finite loss."""
