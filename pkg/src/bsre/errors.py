"""Exception hierarchy shared by the solver modules.

Every failure mode raised on purpose derives from :class:`BsreError` so the
CLI can map categories onto exit codes without string matching.
"""

from __future__ import annotations

__all__ = [
    "BsreError",
    "InvalidConfigurationError",
    "DomainError",
    "ContractViolationError",
    "BoundViolationError",
    "BallViolationError",
    "NonConvergenceError",
    "OracleFailureError",
]


class BsreError(Exception):
    """Base class for all deliberate solver errors."""

    kind = "error"


class InvalidConfigurationError(BsreError):
    """A config value violates a stated constraint (wrong range, shape, key)."""

    kind = "invalid-configuration"


class DomainError(BsreError):
    """An argument lies outside the mathematical domain of an operation."""

    kind = "domain"


class ContractViolationError(BsreError):
    """An operation was applied to an object that breaks its precondition."""

    kind = "contract-violation"


class BoundViolationError(BsreError):
    """An evaluated coefficient exceeded its declared bound."""

    kind = "bound-violation"


class BallViolationError(BsreError):
    """A fixed-point iterate escaped the invariant ball B(r)."""

    kind = "ball-violation"


class NonConvergenceError(BsreError):
    """An iteration hit its budget before reaching tolerance."""

    kind = "non-convergence"

    def __init__(self, message: str, residuals: list[float] | None = None):
        super().__init__(message)
        self.residuals = list(residuals) if residuals is not None else []


class OracleFailureError(BsreError):
    """A reference integration failed (blow-up or rejected step)."""

    kind = "oracle-failure"
