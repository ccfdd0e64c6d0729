"""Exception hierarchy shared by all modules."""


class TVControlError(Exception):
    """Base class for every error raised by the package."""


class DimensionMismatch(TVControlError, ValueError):
    pass


class MassNotSPD(TVControlError, ValueError):
    """The inertia matrix is not symmetric positive definite; the model is ill-posed."""


class GridMismatch(TVControlError, ValueError):
    pass


class SingularEffectiveMatrix(TVControlError, ArithmeticError):
    """The Newmark effective matrix could not be factorized.

    This happens when the step interacts pathologically with an indefinite
    damping or stiffness matrix; refining the time step usually helps.
    """


class WeightsError(TVControlError, ValueError):
    pass


class MaxIterExceeded(TVControlError, RuntimeError):
    """An iterative solver stopped before meeting its tolerance.

    The best iterate is attached as ``result`` so callers may still use it.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class PrecondSingular(TVControlError, ArithmeticError):
    """The gamma=0 operator is singular (uncontrollable or degenerate system)."""


class MaxOuterExceeded(MaxIterExceeded):
    pass


class ParseError(TVControlError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(TVControlError, ValueError):
    pass
