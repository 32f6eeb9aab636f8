"""Exception hierarchy shared by all modules."""


class MatgroundError(Exception):
    """Base class. ``step`` is filled in when raised inside a rollout."""

    step = None


class DomainError(MatgroundError, ValueError):
    """A shape or particle lies outside the simulation safe margin."""


class OutOfDomainError(DomainError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class CatalogError(MatgroundError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class InversionError(MatgroundError, ArithmeticError):
    """A deformation gradient has non-positive determinant."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class CompositionError(MatgroundError, ValueError):
    pass


class GeometryError(MatgroundError, ValueError):
    pass


class TrainingError(MatgroundError, FloatingPointError):
    pass


class DifferentiationError(MatgroundError, FloatingPointError):
    pass


class FormatError(MatgroundError, ValueError):
    """Malformed binary or text artifact."""
