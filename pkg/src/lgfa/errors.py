"""Exception types shared across the package."""


class LgfaError(Exception):
    """Base class for all package errors."""


class EmptyInput(LgfaError):
    pass


class ClassMismatch(LgfaError):
    pass


class GeometryError(LgfaError):
    pass


class SchemaError(LgfaError):
    pass


class DegenerateMerge(LgfaError):
    pass


class DegenerateGeometry(LgfaError):
    pass


class InsufficientInput(LgfaError):
    pass


class SpecError(LgfaError):
    pass


class DegenerateScale(LgfaError):
    pass


class EmptyAggregate(LgfaError):
    pass


class ClassAbsent(LgfaError):
    pass
