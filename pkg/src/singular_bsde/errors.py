"""Exception types shared across the package."""


class SingularBsdeError(Exception):
    """Base class for all package errors."""


class DivergentIntegral(SingularBsdeError):
    """The tail integral defining G does not converge."""


class DomainError(SingularBsdeError, ValueError):
    """An argument lies outside the domain of a companion function."""


class BracketFailure(SingularBsdeError):
    """No sign-changing bracket was found for a root."""


class MissingDerivative(SingularBsdeError):
    """A custom driver lacks a derivative that the requested quantity needs."""


class UnreachableLevel(SingularBsdeError, UserWarning):
    """The driver never reaches the level -|lambda| * eta_cap.

    Issued as a warning; the upper envelope then starts at the natural
    endpoint y = 0 of the domain.
    """


class ConfigError(SingularBsdeError, ValueError):
    """Invalid or inconsistent configuration."""


class NodeSolveFailure(SingularBsdeError):
    """The implicit equation at a time node could not be solved."""


class NoContraction(SingularBsdeError):
    """Picard differences stopped shrinking."""


class ConditionRefused(SingularBsdeError):
    """The driver does not satisfy the structural condition a solver needs."""


class ShapeMismatch(SingularBsdeError, ValueError):
    """Arrays that must share a shape do not."""


class GridTooCoarse(SingularBsdeError):
    """The dynamic-programming path ran into the edge of its grid."""
