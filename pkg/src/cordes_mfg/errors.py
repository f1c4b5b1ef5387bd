"""Exception types shared across the solver modules."""


class ContractViolation(ValueError):
    """An input broke a documented precondition (shape, symmetry, grid mismatch)."""


class DomainError(ValueError):
    """A quantity was requested outside the domain where it is defined."""


class SolverFailure(RuntimeError):
    """An iterative solver stopped without meeting its tolerance.

    The best iterate and the residual history are attached so callers can
    inspect or report the partial result.
    """

    def __init__(self, message, best=None, history=None):
        super().__init__(message)
        self.best = best
        self.history = list(history) if history is not None else []


class LinearSolverError(SolverFailure):
    """A sparse factorization failed, typically because the system is singular."""


class QPSolverError(SolverFailure):
    """The simplex-constrained dual QP of the Moreau envelope did not converge."""


class ConfigError(ValueError):
    """A run configuration is malformed; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
