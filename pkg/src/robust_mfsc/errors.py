"""
Exception types shared across the solver, learning and CLI layers.

The command line maps each family onto a stable exit code so scripted
experiment runs can tell a bad configuration from a numerical failure.
"""
from __future__ import annotations

from typing import Any, Dict, Optional

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_RANK = 3
EXIT_ROBUSTNESS = 4
EXIT_CHECKS = 5


class ConfigError(ValueError):
    """Raised when an experiment configuration cannot be parsed or is incomplete."""


class SolverError(RuntimeError):
    """Numerical failure inside a Lyapunov / Riccati iteration.

    ``trace`` carries whatever part of the iteration history was recorded
    before the failure, so callers can still write diagnostics.
    """

    def __init__(self, message: str, trace: Optional[Any] = None) -> None:
        super().__init__(message)
        self.trace = trace


class StabilizerError(SolverError):
    """No admissible initial gain could be produced or verified."""


class RankConditionError(RuntimeError):
    """Collected data does not excite the regression enough to solve it."""

    def __init__(
        self,
        message: str,
        condition: str = "",
        ranks: Optional[Dict[str, int]] = None,
    ) -> None:
        super().__init__(message)
        self.condition = condition
        self.ranks = dict(ranks or {})


class SimulationError(RuntimeError):
    """A simulated trajectory left the finite range."""

    def __init__(self, message: str, step_index: int = -1) -> None:
        super().__init__(message)
        self.step_index = step_index


class PipelineError(RuntimeError):
    """Failure of one learning phase, tagged with the phase name."""

    def __init__(self, phase: str, cause: BaseException) -> None:
        super().__init__(f"[{phase}] {cause}")
        self.phase = phase
        self.cause = cause


def exit_code_for(exc: BaseException) -> int:
    """Translate an exception raised by any phase into a CLI exit code."""
    if isinstance(exc, PipelineError):
        return exit_code_for(exc.cause)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, RankConditionError):
        return EXIT_RANK
    if isinstance(exc, (SolverError, SimulationError)):
        return EXIT_SOLVER
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return EXIT_SOLVER
