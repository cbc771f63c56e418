"""Exception hierarchy shared across the package."""


class PulseshiftError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PulseshiftError):
    """Bad configuration: unknown key, wrong type, missing file, invalid range."""


class ValidationError(PulseshiftError):
    """Structurally invalid input: shapes, lengths, or schedule constraints."""


class ShapeError(ValidationError):
    """Tensor shapes incompatible with the requested operation."""


class OutOfRangePairing(ValidationError):
    """A pairing schedule would send some frame index outside the clip."""


class NumericalError(PulseshiftError):
    """Non-finite values or a failed numerical check."""
