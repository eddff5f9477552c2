"""Exception types shared across the engine, the pipelines, and the service."""


class SignForgeError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(SignForgeError, ValueError):
    """Tensor or image geometry does not satisfy an operation's contract."""


class FormatError(SignForgeError, ValueError):
    """A serialized payload (PPM, base64, weight file, wire body) is malformed.

    ``stage`` names the pipeline stage that rejected the payload, so callers
    such as the HTTP service can report where decoding failed.
    """

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class FileTruncatedError(SignForgeError, OSError):
    """A binary file ended before the declared payload was complete."""


class NumericError(SignForgeError, ArithmeticError):
    """A computation produced or received non-finite values."""


class ConfigError(SignForgeError, ValueError):
    """Invalid run configuration: bad flag values, missing files, empty data."""


class ContractError(SignForgeError, ValueError):
    """An input violates a documented value-range or normalization contract."""
