"""
Initial admissible gains for the inner loops.

A gain ``K0`` is admissible for a frozen disturbance gain ``L`` when the
closed loop ``[A + GL - BK0 | C - DK0]`` is mean-square stable (Hurwitz for the
deterministic instance). Candidates come from the LMI

    [ A X + X A' + B Y + Y'B'    CX + DY ]
    [ (CX + DY)'                 -X      ]  <  -eps I,     X >= I

with ``K0 = -Y X^{-1}``, minimizing ``tr X + |Y|_F``. The floor on ``X`` fixes the
scale of the homogeneous LMI so that ``|K0| <= |Y|`` stays of the order of ``eps``.
The deterministic instance drops the second block row and column. Every
returned gain is re-checked against the operator spectrum.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import cvxpy as cp
import numpy as np
from scipy import linalg

from .errors import StabilizerError
from .lyapunov import LyapOperatorSpec, is_ms_stable
from .model import SystemModel, as_matrix

if TYPE_CHECKING:  # pragma: no cover
    from .riccati import RiccatiProblem

LOGGER = logging.getLogger(__name__)

X_FLOOR = 1.0


@dataclass(slots=True)
class LmiProblem:
    """Data of one stabilizer LMI; ``A_eff`` already contains ``G L``."""

    A_eff: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    epsilon: float = 5.0
    stochastic: bool = True
    x_floor: float = X_FLOOR

    def __post_init__(self) -> None:
        self.A_eff = as_matrix(self.A_eff, "A_eff")
        self.B = as_matrix(self.B, "B")
        self.C = as_matrix(self.C, "C")
        self.D = as_matrix(self.D, "D")
        if not self.epsilon > 0:
            raise ValueError("LMI margin epsilon must be positive")
        if not self.x_floor > 0:
            raise ValueError("LMI floor on X must be positive")

    @classmethod
    def for_problem(
        cls, problem: "RiccatiProblem", L: np.ndarray, epsilon: float
    ) -> "LmiProblem":
        system = problem.system
        return cls(
            A_eff=system.A + system.G @ as_matrix(L, "L"),
            B=system.B,
            C=system.C,
            D=system.D,
            epsilon=epsilon,
            stochastic=problem.stochastic,
        )

    def closed_loop_model(self) -> SystemModel:
        n = self.A_eff.shape[0]
        return SystemModel(
            A=self.A_eff, B=self.B, G=np.zeros((n, 1)), C=self.C, D=self.D
        )


def verify_stabilizer(
    K0: np.ndarray,
    L_fixed: np.ndarray,
    sys: SystemModel,
    stochastic: bool = True,
) -> bool:
    op = LyapOperatorSpec(sys=sys, K=K0, L=L_fixed, deterministic=not stochastic)
    return is_ms_stable(op)


def _verify(prob: LmiProblem, K0: np.ndarray) -> bool:
    model = prob.closed_loop_model()
    return verify_stabilizer(K0, np.zeros((1, model.n)), model, prob.stochastic)


def find_stabilizing_gain(
    prob: LmiProblem,
    allow_zero: bool = True,
    solver: Optional[str] = None,
) -> np.ndarray:
    n = prob.A_eff.shape[0]
    m = prob.B.shape[1]
    if allow_zero and _verify(prob, np.zeros((m, n))):
        LOGGER.debug("Zero gain is admissible; skipping LMI solve.")
        return np.zeros((m, n))

    X = cp.Variable((n, n), symmetric=True)
    Y = cp.Variable((m, n))
    AX = prob.A_eff @ X
    BY = prob.B @ Y
    top_left = AX + AX.T + BY + BY.T
    if prob.stochastic:
        coupling = prob.C @ X + prob.D @ Y
        block = cp.bmat([[top_left, coupling], [coupling.T, -X]])
        size = 2 * n
    else:
        block = top_left
        size = n
    # symmetric part keeps the constraint well posed for the conic solver
    constraints = [
        X >> prob.x_floor * np.eye(n),
        (block + block.T) / 2 << -prob.epsilon * np.eye(size),
    ]
    problem = cp.Problem(cp.Minimize(cp.trace(X) + cp.norm(Y, "fro")), constraints)
    try:
        problem.solve(solver=solver)
    except cp.SolverError as exc:
        raise StabilizerError(f"no stabilizer found: {exc}") from exc
    if problem.status not in ("optimal", "optimal_inaccurate") or X.value is None:
        raise StabilizerError(f"no stabilizer found (status {problem.status})")

    K0 = -Y.value @ linalg.inv(X.value)
    if not _verify(prob, K0):
        raise StabilizerError("LMI solution not stabilizing")
    LOGGER.info(
        "LMI stabilizer found (status %s, trace X %.3e, |K0| %.3e)",
        problem.status,
        float(np.trace(X.value)),
        float(np.linalg.norm(K0, 2)),
    )
    return K0


@dataclass(slots=True)
class LmiInitializer:
    """Initial gains from the stabilizer LMI, with the zero-gain shortcut."""

    epsilon: float = 5.0
    allow_zero: bool = True
    solver: Optional[str] = None

    def __call__(self, problem: "RiccatiProblem", L: np.ndarray) -> np.ndarray:
        prob = LmiProblem.for_problem(problem, L, self.epsilon)
        return find_stabilizing_gain(prob, allow_zero=self.allow_zero, solver=self.solver)


@dataclass(slots=True)
class ZeroGainInitializer:
    """Accept only the zero gain; fail loudly if it is not admissible."""

    def __call__(self, problem: "RiccatiProblem", L: np.ndarray) -> np.ndarray:
        K0 = np.zeros((problem.system.m1, problem.system.n))
        if not verify_stabilizer(K0, L, problem.system, problem.stochastic):
            raise StabilizerError("zero gain is not admissible")
        return K0


@dataclass(slots=True)
class UserGainInitializer:
    """User-supplied gain, falling back to the LMI when it stops being admissible."""

    K0: np.ndarray
    fallback: Optional[LmiInitializer] = None

    def __call__(self, problem: "RiccatiProblem", L: np.ndarray) -> np.ndarray:
        K0 = as_matrix(self.K0, "K0")
        if verify_stabilizer(K0, L, problem.system, problem.stochastic):
            return K0
        if self.fallback is None:
            raise StabilizerError("user-supplied gain is not admissible")
        LOGGER.warning("User-supplied gain not admissible for current L; solving the LMI instead.")
        return self.fallback(problem, L)


def make_initializer(mode: str, epsilon: float, K0: Optional[np.ndarray] = None):
    if mode == "lmi":
        return LmiInitializer(epsilon=epsilon)
    if mode == "zero-check":
        return ZeroGainInitializer()
    if mode == "user":
        if K0 is None:
            raise ValueError("user initializer needs K0")
        return UserGainInitializer(K0=K0, fallback=LmiInitializer(epsilon=epsilon))
    raise ValueError(f"unknown initializer mode {mode!r}")
