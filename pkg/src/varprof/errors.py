"""Exception types shared across modules.

Validation problems derive from ``ValueError``; numerical failures (a solver
that does not converge, a bracket that cannot be found) derive from
``RuntimeError``.  The CLI maps the two families to different exit codes.
"""

from __future__ import annotations


class ProfileError(ValueError):
    """Invalid variance profile or profile document."""


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class ConvergenceError(RuntimeError):
    """A numerical routine failed to converge.

    Parameters
    ----------
    where : str
        ``"module.operation"`` label of the routine that failed.
    message : str
        Human readable diagnostic.
    """

    def __init__(self, where: str, message: str) -> None:
        super().__init__(f"{where}: {message}")
        self.where = where
