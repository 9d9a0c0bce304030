"""
    Exception hierarchy shared by every rtwin module.

    ValidationError and its subclasses describe bad inputs (the CLI exits
    with status 2); every other RtwinError is a runtime failure (status 1).
"""


class RtwinError(Exception):
    """Base class for all engine errors."""


class ValidationError(RtwinError, ValueError):
    """Invalid input, file content or configuration."""


class ConfigValidationError(ValidationError):
    pass


class MissingFileError(ValidationError):
    pass


class GridIndexError(ValidationError):
    pass


class ShapeMismatchError(ValidationError):
    pass


class EmptyMaskError(ValidationError):
    pass


class MissingReferenceDoseError(RtwinError):
    pass


class DivergenceError(RtwinError):
    pass


class LikelihoodUnderflowError(RtwinError):
    pass


class InfeasibleActionError(RtwinError):
    """
    No candidate action satisfies every chance constraint.

    Attributes:
        margins (dict): action id -> (constraint id, worst margin), where the
            margin is the empirical satisfaction fraction minus 1 - alpha.
    """

    def __init__(self, margins: dict[str, tuple[str, float]]):
        self.margins = dict(margins)
        details = ", ".join(
            f"{action}: {constraint} short by {-margin:.3f}"
            for action, (constraint, margin) in self.margins.items()
        )
        super().__init__(f"No feasible action ({details})")


class FractionError(RtwinError):
    """A module error raised while processing one fraction of a scenario."""

    def __init__(self, fraction: int, cause: Exception):
        self.fraction = fraction
        self.cause = cause
        super().__init__(f"Fraction {fraction}: {cause}")
