"""Exception hierarchy shared across the package."""


class CylkernError(Exception):
    """Base class for all package errors."""


class FormatError(CylkernError):
    """Input file violates the documented byte-level grammar."""


class TruncationError(FormatError):
    """File ends before the declared element counts are satisfied."""


class MeshIndexError(FormatError):
    """Face references a vertex index outside the declared range."""


class ParameterError(CylkernError):
    """An argument is outside its documented domain."""


class DegenerateGeometryError(CylkernError):
    """Geometry has no well-defined answer (zero area, rank-deficient, ...)."""


class ConfigError(CylkernError):
    """Configuration file is invalid; carries the offending line when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericalError(CylkernError):
    """A run produced NaN/Inf or otherwise lost numerical meaning."""
