"""Exception hierarchy shared by every solver module.

The CLI maps these onto exit codes, so each class carries the category it
belongs to: configuration problems, solver failures and invariant failures.
"""

from __future__ import annotations


class ForwardFbsdeError(Exception):
    """Base class. ``category`` drives the CLI exit code."""

    category = "solver"

    def __init__(self, message: str, *, module: str | None = None, operation: str | None = None):
        super().__init__(message)
        self.module = module
        self.operation = operation

    def where(self) -> str:
        parts = [p for p in (self.module, self.operation) if p]
        return ".".join(parts) if parts else "unknown"


class ModelError(ForwardFbsdeError):
    """Model inputs break a declared bound (theta bound, dissipativity, rho range)."""


class ModelEvaluationError(ModelError):
    """A coefficient function returned non-finite values."""


class GridError(ForwardFbsdeError):
    """Inconsistent or degenerate discretisation grid."""


class AlignmentError(ForwardFbsdeError):
    """Arrays that should share a time grid do not."""


class DomainError(ForwardFbsdeError):
    """Argument outside the mathematical domain of a function."""


class NumericRangeError(ForwardFbsdeError):
    """Overflow or underflow that would destroy the result."""


class ExtrapolationError(ForwardFbsdeError):
    """Evaluation requested outside a tabulated grid."""


class BoxTooSmallError(ForwardFbsdeError):
    """A bounded 1-D search hit the edge of its interval."""


class SolverError(ForwardFbsdeError):
    """Iterative solver failed to converge."""


class StabilityError(SolverError):
    """A guarded quantity left its safe range during time stepping."""


class IterationError(SolverError):
    """Per-node fixed point did not contract."""


class PreconditionError(ForwardFbsdeError):
    """Inputs are valid but fall outside the regime where the solver is justified."""


class RegimeError(PreconditionError):
    """Requested combination does not belong to any supported regime."""


class ArgumentError(ForwardFbsdeError):
    """Ordering or range problem in plain arguments."""

    category = "schema"


class ConfigError(ForwardFbsdeError):
    """Configuration file does not match the schema."""

    category = "schema"

    def __init__(self, message: str, *, line: int | None = None, path: str | None = None):
        super().__init__(message, module="cli", operation="config")
        self.line = line
        self.path = path


class InvariantViolation(ForwardFbsdeError):
    """A hard invariant failed; carries the offending statistic."""

    category = "invariant"

    def __init__(self, message: str, *, statistic: float | None = None, **kw):
        super().__init__(message, **kw)
        self.statistic = statistic
