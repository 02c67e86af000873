"""Exception hierarchy shared by all modules."""


class InvgeoError(Exception):
    """Base class for every error raised by the package."""


class InvalidPointError(InvgeoError, ValueError):
    pass


class ConfigurationError(InvgeoError, ValueError):
    pass


class OutOfInjectivityError(InvgeoError):
    """Two points that must be joined by a unique minimizing arc are too far apart."""


class NotAnIsometryError(InvgeoError):
    def __init__(self, message, defect=None, worst_point=None):
        super().__init__(message)
        self.defect = defect
        self.worst_point = worst_point


class AllPointsFixed(InvgeoError):
    """Raised by fixed-point search when the map is the identity."""


class SubdivisionTooCoarseError(InvgeoError):
    def __init__(self, message, suggested_n=None):
        super().__init__(message)
        self.suggested_n = suggested_n


class MissingPeriodError(InvgeoError):
    pass


class NonConvergenceError(InvgeoError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InvariantViolation(InvgeoError):
    pass


class RefinementError(InvgeoError):
    pass


class ConstructionError(InvgeoError):
    pass


class StudyInapplicableError(InvgeoError):
    pass
