"""Exception hierarchy shared by every module.

CLI exit codes key off these classes (see ``ghostgeo.harness.cli``).
"""


class GhostGeoError(Exception):
    """Base class for all package errors."""


class StructuralError(GhostGeoError, ValueError):
    """Malformed input: size mismatch, bad file, mismatched cache."""


class ShapeError(StructuralError):
    """Array or vector dimension does not match the declared shape."""


class DomainError(GhostGeoError, ValueError):
    """Argument outside the operation's domain."""


class NumericError(GhostGeoError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ScopeViolation(GhostGeoError):
    """Enhancement written to a ghost outside the local spotlight."""


class InvariantViolation(GhostGeoError, AssertionError):
    """A graph or pipeline invariant does not hold."""


class DegeneratePoseError(DomainError):
    """Camera placed inside solid geometry."""


class ConfigError(GhostGeoError, ValueError):
    """Invalid or unknown configuration keys."""
