"""Exception types shared across the package."""


class DefectGenError(Exception):
    """Base class for all package errors."""


class ParameterError(DefectGenError, ValueError):
    """An argument violates a documented precondition."""


class FitError(DefectGenError):
    """A synthetic defect mask could not be placed inside the foreground."""


class StateError(DefectGenError):
    """An operation was called before its prerequisites were satisfied."""


class UndefinedMetricError(DefectGenError, ValueError):
    """A metric is undefined for the given ground truth (e.g. single class)."""
