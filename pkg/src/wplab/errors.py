"""Exception taxonomy shared across the package.

Solver failures carry the report of the failed solve so callers (and the
command-line runner) can emit stage-tagged diagnostics.
"""

from __future__ import annotations

__all__ = [
    "WplabError",
    "DomainError",
    "ConstructionError",
    "PreconditionError",
    "SolverError",
    "ConvergenceError",
    "ConfigError",
]


class WplabError(Exception):
    """Base class for all package errors."""


class DomainError(WplabError, ValueError):
    """An argument is outside the mathematical domain of the operation."""


class ConstructionError(WplabError):
    """A surface could not be constructed; carries solver diagnostics."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class PreconditionError(WplabError):
    """A checked precondition of an operation failed."""


class SolverError(WplabError):
    """A linear or nonlinear solve did not reach its tolerance."""

    def __init__(self, message, report=None, stage=None):
        super().__init__(message)
        self.report = report
        self.stage = stage


class ConvergenceError(SolverError):
    """An iteration ran out of its budget before converging."""


class ConfigError(WplabError, ValueError):
    """A run configuration document is malformed."""
