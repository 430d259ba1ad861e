"""Exception taxonomy shared across the package.

Geometry failures carry enough context (point, eigenvalue, time) to be
surfaced verbatim by the CLI.
"""

from __future__ import annotations


class TorifanoError(Exception):
    """Base class for all package-specific failures."""


class NotDelzant(TorifanoError):
    """A vertex is not the unimodular intersection of exactly m facets."""


class Unbounded(TorifanoError):
    """The labels admit a nonzero recession direction."""


class Empty(TorifanoError):
    """The labels cut out an empty (or lower-dimensional) region."""


class NotBarycentred(TorifanoError):
    """Fano mode requires every facet offset to equal 1 exactly."""


class BoundaryContact(TorifanoError):
    """Evaluation requested at a point with some facet value <= 0."""


class ConvexityLoss(TorifanoError):
    """Hess(u) stopped being positive definite; the potential is invalid."""


class TamingFailure(TorifanoError):
    """Hess(u) + i*B is not positive definite at some point."""

    def __init__(self, message: str, point=None, min_eigenvalue: float | None = None):
        super().__init__(message)
        self.point = point
        self.min_eigenvalue = min_eigenvalue


class NoConvergence(TorifanoError):
    """Newton iteration exhausted its budget."""


class SingularMatrix(TorifanoError):
    """A matrix that must be invertible is numerically singular."""


class EvaluationFailure(TorifanoError):
    """A supplied scalar field produced a non-finite value at a node."""


class StabilityAbort(TorifanoError):
    """Time stepping blew past the safeguard; carries the failing time."""

    def __init__(self, message: str, t: float):
        super().__init__(f"{message} (t={t:.6g})")
        self.t = t


class ConfigError(TorifanoError):
    """Config file failed to parse; names the offending field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
