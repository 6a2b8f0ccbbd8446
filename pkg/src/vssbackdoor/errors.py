"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, FormatError -> 3,
NumericError -> 4.
"""


class VssBackdoorError(Exception):
    pass


class DomainError(VssBackdoorError, ValueError):
    """An argument lies outside the domain of the operation."""


class DimensionError(VssBackdoorError, ValueError):
    """Array shapes are inconsistent."""


class NumericError(VssBackdoorError, ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class EmptyMaskError(DomainError):
    pass


class PlanError(VssBackdoorError, ValueError):
    pass


class InfeasibleRateError(PlanError):
    pass


class FormatError(VssBackdoorError, ValueError):
    """A file does not follow the expected layout."""


class ConfigError(VssBackdoorError, ValueError):
    pass


class DivergenceError(NumericError):
    """Training loss became non-finite; ``state`` holds the last good parameters."""

    def __init__(self, message, state=None, step=None):
        super().__init__(message, index=step)
        self.state = state
        self.step = step
