"""
Dual-loop policy iteration for indefinite Riccati equations.

One solver covers three instances:

* the stochastic equation for ``P*`` (weights ``Q, R`` on ``[A, B, G | C, D]``),
* the deterministic mean field equation for ``S*`` (weights ``Q_s, Upsilon`` on
  ``[A_s, B, G | 0, 0]``),
* the shifted equation for ``Pi* = S* - P*`` (weights ``-Q_Gamma, Upsilon`` on
  ``[A - B K_p* + G L_p*, B, G | 0, 0]``), which is what the data-driven
  mean field phase iterates on.

The outer loop freezes the disturbance gain ``L`` and hands the resulting
H2-type problem to the inner loop; the inner loop is Kleinman-style policy
iteration on the control gain ``K``. Both loops stop on the spectral norm of
the gain change.

Alternative update laws that refresh ``K`` and ``L`` simultaneously from one
Lyapunov solve exist in the literature; they are not implemented here because
they lose the monotone structure the traces below are checked against.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from scipy import linalg

from .config import DualLoopConfig
from .errors import SolverError
from .lyapunov import (
    LyapOperatorSpec,
    apply_generalized_lyapunov,
    check_exact_detectability,
    is_ms_stable,
    solve_generalized_lyapunov,
)
from .model import (
    CostSpec,
    DerivedCost,
    SystemModel,
    as_matrix,
    derived_cost_quantities,
    invert_input_weight,
    symmetrize,
)
from .stabilizer import LmiInitializer

LOGGER = logging.getLogger(__name__)

InitProvider = Callable[["RiccatiProblem", np.ndarray], np.ndarray]
GainPerturbation = Callable[[int], np.ndarray]


@dataclass(slots=True)
class RiccatiProblem:
    """One instance of the indefinite Riccati equation

    ``A'P + PA + [C'PC] + Q + gamma^-2 PGG'P - S'(R + [D'PD])^-1 S = 0``
    with ``S = B'P + [D'PC]``; bracketed terms only in the stochastic case.
    """

    system: SystemModel
    Q: np.ndarray
    R: np.ndarray
    gamma: float
    stochastic: bool = True
    label: str = "sare"

    def __post_init__(self) -> None:
        self.Q = symmetrize(as_matrix(self.Q, "Q"))
        self.R = symmetrize(as_matrix(self.R, "R"))
        self.gamma = float(self.gamma)
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    @classmethod
    def sare(cls, sys: SystemModel, cost: CostSpec) -> "RiccatiProblem":
        return cls(system=sys, Q=cost.Q, R=cost.R, gamma=cost.gamma, stochastic=True, label="sare")

    @classmethod
    def are(
        cls, sys: SystemModel, cost: CostSpec, derived: DerivedCost
    ) -> "RiccatiProblem":
        return cls(
            system=sys.with_drift(derived.A_s),
            Q=derived.Q_s,
            R=derived.Upsilon,
            gamma=cost.gamma,
            stochastic=False,
            label="are",
        )

    @classmethod
    def shifted(
        cls,
        sys: SystemModel,
        cost: CostSpec,
        derived: DerivedCost,
        K_p: np.ndarray,
        L_p: np.ndarray,
    ) -> "RiccatiProblem":
        A_pi = sys.A - sys.B @ K_p + sys.G @ L_p
        return cls(
            system=sys.with_drift(A_pi),
            Q=-derived.Q_Gamma,
            R=derived.Upsilon,
            gamma=cost.gamma,
            stochastic=False,
            label="pi",
        )

    @property
    def n(self) -> int:
        return self.system.n

    def zero_gains(self) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros((self.system.m1, self.n)), np.zeros((self.system.m2, self.n))

    def operator(self, K: np.ndarray, L: np.ndarray) -> LyapOperatorSpec:
        return LyapOperatorSpec(sys=self.system, K=K, L=L, deterministic=not self.stochastic)

    def input_weight(self, P: np.ndarray) -> np.ndarray:
        if not self.stochastic:
            return self.R
        return symmetrize(self.R + self.system.D.T @ P @ self.system.D)

    def cross_term(self, P: np.ndarray) -> np.ndarray:
        """``B'P + D'PC`` (``B'P`` for deterministic instances)."""
        term = self.system.B.T @ P
        if self.stochastic:
            term = term + self.system.D.T @ P @ self.system.C
        return term

    def stage_weight(self, K: np.ndarray, L: np.ndarray) -> np.ndarray:
        """``Q - gamma^2 L'L + K'RK``; may be indefinite."""
        return symmetrize(self.Q - self.gamma**2 * L.T @ L + K.T @ self.R @ K)


def gain_from_value(
    P: np.ndarray, problem: RiccatiProblem, which: str = "control"
) -> np.ndarray:
    P = symmetrize(as_matrix(P, "P"))
    if which == "disturbance":
        return problem.system.G.T @ P / problem.gamma**2
    if which != "control":
        raise ValueError(f"unknown gain branch {which!r}")
    weight = problem.input_weight(P)
    invert_input_weight(weight, label="R + D'PD")
    return linalg.solve(weight, problem.cross_term(P), assume_a="sym")


def problem_residual(problem: RiccatiProblem, P: np.ndarray) -> float:
    """Frobenius norm of the left-hand side of the Riccati equation."""
    P = symmetrize(as_matrix(P, "P"))
    system = problem.system
    lhs = system.A.T @ P + P @ system.A + problem.Q
    if problem.stochastic:
        lhs = lhs + system.C.T @ P @ system.C
    lhs = lhs + P @ system.G @ system.G.T @ P / problem.gamma**2
    cross = problem.cross_term(P)
    try:
        lhs = lhs - cross.T @ linalg.solve(problem.input_weight(P), cross, assume_a="sym")
    except linalg.LinAlgError as exc:
        raise SolverError("input weight singular in residual evaluation") from exc
    return float(np.linalg.norm(symmetrize(lhs)))


def h2_residual(problem: RiccatiProblem, P: np.ndarray, L: np.ndarray) -> float:
    """Residual of the H2-type equation obtained by freezing ``L``."""
    K = gain_from_value(P, problem)
    op = problem.operator(K, L)
    return float(np.linalg.norm(apply_generalized_lyapunov(op, P) + problem.stage_weight(K, L)))


@dataclass(slots=True)
class InnerStep:
    j: int
    P: np.ndarray
    K: np.ndarray
    gain_change: float
    residual: float

    @property
    def trace_P(self) -> float:
        return float(np.trace(self.P))


@dataclass(slots=True)
class OuterStep:
    k: int
    L_in: np.ndarray
    P: np.ndarray
    K: np.ndarray
    L: np.ndarray
    gain_change: float
    residual: float
    inner: List[InnerStep] = field(default_factory=list)

    @property
    def trace_P(self) -> float:
        return float(np.trace(self.P))

    @property
    def inner_count(self) -> int:
        return len(self.inner)


@dataclass(slots=True)
class IterationTrace:
    label: str
    steps: List[OuterStep] = field(default_factory=list)

    @property
    def outer_count(self) -> int:
        return len(self.steps)

    def values(self) -> List[np.ndarray]:
        return [step.P for step in self.steps]

    def inner_values(self, k: int) -> List[np.ndarray]:
        return [inner.P for inner in self.steps[k - 1].inner]

    def to_rows(self) -> List[Dict[str, float]]:
        """Flat rows; ``j = 0`` marks the outer summary of step ``k``."""
        rows: List[Dict[str, float]] = []
        for step in self.steps:
            for inner in step.inner:
                rows.append(
                    {
                        "k": step.k,
                        "j": inner.j,
                        "TrP": inner.trace_P,
                        "gain_change": inner.gain_change,
                        "residual": inner.residual,
                    }
                )
            rows.append(
                {
                    "k": step.k,
                    "j": 0,
                    "TrP": step.trace_P,
                    "gain_change": step.gain_change,
                    "residual": step.residual,
                }
            )
        return rows

    def write_csv(self, destination: Path) -> None:
        destination.parent.mkdir(parents=True, exist_ok=True)
        with destination.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=["k", "j", "TrP", "gain_change", "residual"])
            writer.writeheader()
            for row in self.to_rows():
                writer.writerow({key: repr(value) if isinstance(value, float) else value for key, value in row.items()})


@dataclass(slots=True)
class RiccatiSolution:
    P: np.ndarray
    K: np.ndarray
    L: np.ndarray
    residual: float
    stable: bool
    iterations: int = 0

    def as_dict(self) -> Dict[str, object]:
        return {
            "P": self.P.tolist(),
            "K": self.K.tolist(),
            "L": self.L.tolist(),
            "residual": self.residual,
            "stable": self.stable,
            "iterations": self.iterations,
        }


@dataclass(slots=True)
class InnerResult:
    P: np.ndarray
    K: np.ndarray
    steps: List[InnerStep]


def inner_loop(
    problem: RiccatiProblem,
    L_fixed: np.ndarray,
    K0: np.ndarray,
    cfg: DualLoopConfig,
    *,
    tol: Optional[float] = None,
    fixed_steps: Optional[int] = None,
    perturb: Optional[GainPerturbation] = None,
) -> InnerResult:
    """Policy iteration on ``K`` for the frozen disturbance gain ``L_fixed``.

    With ``fixed_steps`` the loop runs exactly that many steps and skips the
    stopping test; ``perturb(j)`` is added to every improved gain.
    """
    tol = cfg.xi if tol is None else tol
    L = as_matrix(L_fixed, "L")
    K = as_matrix(K0, "K0")
    if not is_ms_stable(problem.operator(K, L)):
        raise SolverError("initial gain not admissible")

    steps: List[InnerStep] = []
    limit = fixed_steps if fixed_steps is not None else cfg.max_inner
    for j in range(1, limit + 1):
        op = problem.operator(K, L)
        if j > 1 and not is_ms_stable(op):
            raise SolverError(f"gain lost admissibility at inner step {j}", trace=steps)
        P = solve_generalized_lyapunov(op, problem.stage_weight(K, L))
        K_next = gain_from_value(P, problem)
        if perturb is not None:
            K_next = K_next + perturb(j)
        change = float(np.linalg.norm(K_next - K, 2))
        steps.append(
            InnerStep(j=j, P=P, K=K_next, gain_change=change, residual=h2_residual(problem, P, L))
        )
        LOGGER.debug("inner j=%d TrP=%.10f |dK|=%.3e", j, float(np.trace(P)), change)
        K = K_next
        if fixed_steps is None and change < tol:
            return InnerResult(P=P, K=K, steps=steps)
    if fixed_steps is not None:
        return InnerResult(P=steps[-1].P, K=K, steps=steps)
    raise SolverError(f"inner loop did not converge in {cfg.max_inner} steps", trace=steps)


def starting_gain(
    problem: RiccatiProblem,
    L: np.ndarray,
    warm: Optional[np.ndarray],
    init: InitProvider,
) -> np.ndarray:
    if warm is not None:
        if is_ms_stable(problem.operator(warm, L)):
            return warm
        LOGGER.info("Warm-start gain not admissible for new L; re-initialising.")
    return init(problem, L)


def outer_step(
    problem: RiccatiProblem,
    k: int,
    L_in: np.ndarray,
    warm: Optional[np.ndarray],
    cfg: DualLoopConfig,
    init: InitProvider,
    *,
    inner_tol: Optional[float] = None,
    inner_steps: Optional[int] = None,
    perturb: Optional[GainPerturbation] = None,
) -> OuterStep:
    K0 = starting_gain(problem, L_in, warm, init)
    result = inner_loop(
        problem, L_in, K0, cfg, tol=inner_tol, fixed_steps=inner_steps, perturb=perturb
    )
    L_out = gain_from_value(result.P, problem, "disturbance")
    return OuterStep(
        k=k,
        L_in=L_in,
        P=result.P,
        K=result.K,
        L=L_out,
        gain_change=float(np.linalg.norm(L_out - L_in, 2)),
        residual=problem_residual(problem, result.P),
        inner=result.steps,
    )


def _finalize(problem: RiccatiProblem, trace: IterationTrace) -> RiccatiSolution:
    P = symmetrize(trace.steps[-1].P)
    K = gain_from_value(P, problem)
    L = gain_from_value(P, problem, "disturbance")
    stable = is_ms_stable(problem.operator(K, L))
    if not stable:
        raise SolverError(f"{problem.label}: converged solution is not stabilizing", trace=trace)
    return RiccatiSolution(
        P=P,
        K=K,
        L=L,
        residual=problem_residual(problem, P),
        stable=stable,
        iterations=trace.outer_count,
    )


def dual_loop(
    problem: RiccatiProblem,
    cfg: Optional[DualLoopConfig] = None,
    init: Optional[InitProvider] = None,
) -> tuple[RiccatiSolution, IterationTrace]:
    cfg = cfg or DualLoopConfig()
    init = init or LmiInitializer(epsilon=cfg.epsilon_lmi)
    _, L = problem.zero_gains()
    warm: Optional[np.ndarray] = None
    trace = IterationTrace(label=problem.label)
    for k in range(1, cfg.max_outer + 1):
        try:
            step = outer_step(problem, k, L, warm, cfg, init)
        except SolverError as exc:
            if exc.trace is None or isinstance(exc.trace, list):
                exc.trace = trace
            raise
        trace.steps.append(step)
        LOGGER.info(
            "%s outer k=%d inner=%d TrP=%.8f |dL|=%.3e",
            problem.label,
            k,
            step.inner_count,
            step.trace_P,
            step.gain_change,
        )
        if step.gain_change < cfg.xi:
            return _finalize(problem, trace), trace
        L = step.L
        warm = step.K
    raise SolverError(f"{problem.label}: outer loop did not converge in {cfg.max_outer} steps", trace=trace)


def outer_loop_sare(
    sys: SystemModel,
    cost: CostSpec,
    cfg: Optional[DualLoopConfig] = None,
    init: Optional[InitProvider] = None,
    precheck: bool = False,
) -> tuple[RiccatiSolution, IterationTrace]:
    if precheck and not check_exact_detectability(sys, cost.Q):
        LOGGER.warning("System is not exactly detectable through Q; convergence is not guaranteed.")
    return dual_loop(RiccatiProblem.sare(sys, cost), cfg, init)


def outer_loop_are(
    sys: SystemModel,
    cost: CostSpec,
    P_star: np.ndarray,
    cfg: Optional[DualLoopConfig] = None,
    init: Optional[InitProvider] = None,
) -> tuple[RiccatiSolution, IterationTrace]:
    derived = derived_cost_quantities(sys, cost, P_star)
    return dual_loop(RiccatiProblem.are(sys, cost, derived), cfg, init)


def outer_loop_pi(
    sys: SystemModel,
    cost: CostSpec,
    P_star: np.ndarray,
    cfg: Optional[DualLoopConfig] = None,
    init: Optional[InitProvider] = None,
) -> tuple[RiccatiSolution, IterationTrace]:
    """Solve for ``Pi* = S* - P*`` starting from ``L_pi = 0``."""
    problem = shifted_problem(sys, cost, P_star)
    return dual_loop(problem, cfg, init)


def shifted_problem(sys: SystemModel, cost: CostSpec, P_star: np.ndarray) -> RiccatiProblem:
    sare = RiccatiProblem.sare(sys, cost)
    K_p = gain_from_value(P_star, sare)
    L_p = gain_from_value(P_star, sare, "disturbance")
    derived = derived_cost_quantities(sys, cost, P_star)
    return RiccatiProblem.shifted(sys, cost, derived, K_p, L_p)


def riccati_residual(
    X: np.ndarray,
    sys: SystemModel,
    cost: CostSpec,
    which: str = "sare",
    P_star: Optional[np.ndarray] = None,
) -> float:
    if which == "sare":
        return problem_residual(RiccatiProblem.sare(sys, cost), X)
    if which == "are":
        if P_star is None:
            raise ValueError("ARE residual needs P_star")
        derived = derived_cost_quantities(sys, cost, P_star)
        return problem_residual(RiccatiProblem.are(sys, cost, derived), X)
    raise ValueError(f"unknown equation {which!r}")


def estimate_contraction_rate(
    values: Union[IterationTrace, Sequence[np.ndarray]],
    limit: Optional[np.ndarray] = None,
) -> float:
    """Largest ratio of successive trace gaps to the limit (final iterate by default)."""
    sequence = values.values() if isinstance(values, IterationTrace) else list(values)
    if len(sequence) < 3:
        raise ValueError("contraction estimate needs at least 3 iterates")
    target = sequence[-1] if limit is None else limit
    gaps = [abs(float(np.trace(target - value))) for value in sequence]
    ratios = [after / before for before, after in zip(gaps, gaps[1:]) if before > 1e-12]
    return max(ratios) if ratios else 0.0


def inner_contraction_rates(trace: IterationTrace) -> Dict[int, float]:
    """Per outer step, the inner-loop rate; steps with fewer than 3 inner iterates are skipped."""
    rates: Dict[int, float] = {}
    for step in trace.steps:
        if step.inner_count >= 3:
            rates[step.k] = estimate_contraction_rate(trace.inner_values(step.k))
    return rates


def h2_value(
    problem: RiccatiProblem,
    L: np.ndarray,
    cfg: Optional[DualLoopConfig] = None,
    init: Optional[InitProvider] = None,
) -> np.ndarray:
    """Solution of the H2-type equation for a frozen ``L``."""
    cfg = cfg or DualLoopConfig()
    init = init or LmiInitializer(epsilon=cfg.epsilon_lmi)
    L = as_matrix(L, "L")
    return inner_loop(problem, L, init(problem, L), cfg).P


def outer_set_member(
    problem: RiccatiProblem,
    L: np.ndarray,
    P_star: np.ndarray,
    zeta: float,
    cfg: Optional[DualLoopConfig] = None,
    init: Optional[InitProvider] = None,
) -> bool:
    """``L`` admits an H2 solution ``P_L`` with ``Tr(P* - P_L) <= zeta``."""
    try:
        P_L = h2_value(problem, L, cfg, init)
    except SolverError:
        return False
    return float(np.trace(P_star - P_L)) <= zeta


def inner_set_member(
    problem: RiccatiProblem,
    K: np.ndarray,
    L: np.ndarray,
    rho: float,
    cfg: Optional[DualLoopConfig] = None,
    init: Optional[InitProvider] = None,
) -> bool:
    """``K`` is admissible for ``L`` and ``Tr(P_K - P_L) <= rho``."""
    op = problem.operator(as_matrix(K, "K"), as_matrix(L, "L"))
    if not is_ms_stable(op):
        return False
    P_K = solve_generalized_lyapunov(op, problem.stage_weight(op.K, op.L))
    try:
        P_L = h2_value(problem, L, cfg, init)
    except SolverError:
        return False
    return float(np.trace(P_K - P_L)) <= rho


def tail_bound_holds(trace: IterationTrace, alpha: float, zeta: float) -> bool:
    """Check ``|P^{k+1} - P^k|_2 <= (1 + alpha) alpha^(k-1) zeta`` along the trace."""
    values = trace.values()
    for k, (before, after) in enumerate(zip(values, values[1:]), start=1):
        bound = (1.0 + alpha) * alpha ** (k - 1) * zeta
        if np.linalg.norm(after - before, 2) > bound + 1e-12:
            return False
    return True


def check_are_detectability(sys: SystemModel, cost: CostSpec) -> bool:
    """PBH test for detectability of ``(A, Q^{1/2}(I - Gamma))``."""
    eigenvalues, vectors = linalg.eigh(symmetrize(cost.Q))
    root = vectors @ np.diag(np.sqrt(np.clip(eigenvalues, 0.0, None))) @ vectors.T
    output = root @ (np.eye(sys.n) - cost.Gamma)
    for eigenvalue in linalg.eigvals(sys.A):
        if eigenvalue.real < -1e-9:
            continue
        pencil = np.vstack([sys.A - eigenvalue * np.eye(sys.n), output])
        if np.linalg.matrix_rank(pencil, tol=1e-9) < sys.n:
            return False
    return True


def monotonicity_violations(trace: IterationTrace, P_star: np.ndarray, tol: float = 1e-8) -> List[str]:
    """Ordering checks ``P^k <= P^{k+1} <= P*`` and ``P^(k,j) >= P^(k,j+1) >= P^k``."""
    violations: List[str] = []

    def lowest(matrix: np.ndarray) -> float:
        return float(linalg.eigvalsh(symmetrize(matrix))[0])

    values = trace.values()
    for k, value in enumerate(values, start=1):
        if lowest(P_star - value) < -tol:
            violations.append(f"P^{k} exceeds the limit")
        if k < len(values) and lowest(values[k] - value) < -tol:
            violations.append(f"P^{k + 1} below P^{k}")
    for step in trace.steps:
        inner = [item.P for item in step.inner]
        for j, (before, after) in enumerate(zip(inner, inner[1:]), start=1):
            if lowest(before - after) < -tol:
                violations.append(f"inner ({step.k},{j + 1}) above ({step.k},{j})")
        for j, value in enumerate(inner, start=1):
            if lowest(value - step.P) < -tol:
                violations.append(f"inner ({step.k},{j}) below P^{step.k}")
    return violations


def trace_summary(traces: Iterable[IterationTrace]) -> Dict[str, Dict[str, float]]:
    summary: Dict[str, Dict[str, float]] = {}
    for trace in traces:
        entry: Dict[str, float] = {"outer_iterations": trace.outer_count}
        if trace.outer_count >= 3:
            entry["alpha_outer"] = estimate_contraction_rate(trace)
        inner_rates = inner_contraction_rates(trace)
        if inner_rates:
            entry["alpha_inner_max"] = max(inner_rates.values())
        summary[trace.label] = entry
    return summary
