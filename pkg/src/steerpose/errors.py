"""Exception types raised across the package."""


class ValidationError(ValueError):
    """An input violated a documented precondition."""


class EmptySelectionRule(ValidationError):
    """Requested harmonic order is not allowed by the parity/triangle rule."""


class SolverDegeneracy(RuntimeError):
    """The numerical intertwiner solve returned an unexpected null space."""


class DegenerateOutput(RuntimeError):
    """Network output too small to normalize; ``raw`` holds the tensor."""

    def __init__(self, message, raw=None):
        super().__init__(message)
        self.raw = raw


class AmbiguousProjection(ValidationError):
    """Predicted basis is rank deficient, no unique nearest rotation."""


class DegenerateBasis(ValidationError):
    """Two predicted directions are (numerically) parallel."""


class EmptyOccupancy(ValidationError):
    """Occupancy mask has no set voxel."""


class FormatError(ValueError):
    """Binary file or frame could not be parsed."""

    def __init__(self, message, offset=None, missing=None):
        super().__init__(message)
        self.offset = offset
        self.missing = missing


class ProtocolError(RuntimeError):
    """Malformed frame on the scanner link."""


class ConfigError(ValueError):
    """Config file could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
