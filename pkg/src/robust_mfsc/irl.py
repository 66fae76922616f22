"""
Least-squares dual-loop iteration on integral features.

Every policy-evaluation step of the model-based solver is replaced by one
regression over the data windows. The stochastic phase recovers
``(P, M, L, Lambda)`` with ``M = B'P + D'PC`` and ``Lambda = D'PD`` and sets
``K = (R + Lambda)^-1 M``; the mean field phase works on the mean trajectory
and recovers ``(Pi, K_pi, L_pi)`` of the shifted equation using the gains and
``Upsilon = R + Lambda`` learned in the first phase.

Data are collected once with the exploration policy; the gain-dependent
blocks are recomputed from the stored features at every iteration.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy import linalg

from .config import DualLoopConfig
from .errors import RankConditionError, SolverError
from .features import RANK_TOL, RegressorSet, half_quadratic
from .lyapunov import sym_dim, unvecm, vecm
from .model import CostSpec, SystemModel, as_matrix, invert_input_weight, symmetrize
from .riccati import (
    InitProvider,
    InnerStep,
    IterationTrace,
    OuterStep,
    RiccatiProblem,
    starting_gain,
)
from .stabilizer import LmiInitializer

LOGGER = logging.getLogger(__name__)

TABLE_COLUMNS = ("P", "L_p", "K_p", "Lambda", "Pi", "L_pi", "K_pi")


def _vec(matrix: np.ndarray) -> np.ndarray:
    return np.asarray(matrix).reshape(-1, order="F")


def _unvec(vector: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return np.asarray(vector).reshape((rows, cols), order="F")


@dataclass(slots=True)
class ThetaP:
    P: np.ndarray
    M: np.ndarray
    L: np.ndarray
    Lambda: np.ndarray

    @classmethod
    def from_vector(cls, theta: np.ndarray, n: int, m1: int, m2: int) -> "ThetaP":
        cuts = np.cumsum([sym_dim(n), n * m1, n * m2])
        p_part, m_part, l_part, lam_part = np.split(np.asarray(theta, dtype=float), cuts)
        if lam_part.size != sym_dim(m1):
            raise ValueError(f"parameter vector has length {len(theta)}, expected {cuts[-1] + sym_dim(m1)}")
        return cls(
            P=unvecm(p_part),
            M=_unvec(m_part, m1, n),
            L=_unvec(l_part, m2, n),
            Lambda=unvecm(lam_part),
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate([vecm(symmetrize(self.P)), _vec(self.M), _vec(self.L), vecm(symmetrize(self.Lambda))])

    def control_gain(self, R: np.ndarray) -> np.ndarray:
        weight = symmetrize(R + self.Lambda)
        invert_input_weight(weight, label="R + Lambda")
        return linalg.solve(weight, self.M, assume_a="sym")


@dataclass(slots=True)
class ThetaPi:
    Pi: np.ndarray
    K: np.ndarray
    L: np.ndarray

    @classmethod
    def from_vector(cls, theta: np.ndarray, n: int, m1: int, m2: int) -> "ThetaPi":
        cuts = np.cumsum([sym_dim(n), n * m1])
        pi_part, k_part, l_part = np.split(np.asarray(theta, dtype=float), cuts)
        if l_part.size != n * m2:
            raise ValueError(f"parameter vector has length {len(theta)}, expected {cuts[-1] + n * m2}")
        return cls(Pi=unvecm(pi_part), K=_unvec(k_part, m1, n), L=_unvec(l_part, m2, n))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([vecm(symmetrize(self.Pi)), _vec(self.K), _vec(self.L)])


def _state_feedback_block(features: RegressorSet, gain: np.ndarray) -> np.ndarray:
    """``(I (x) gain) I_xx``, one row per window."""
    blocks = features.integrated_state_products() @ gain.T
    return blocks.reshape(features.rows, -1)


def _check_gain(gain: np.ndarray, rows: int, cols: int, label: str) -> np.ndarray:
    gain = as_matrix(gain, label)
    if gain.shape != (rows, cols):
        raise ValueError(f"{label} has shape {gain.shape}, expected {(rows, cols)}")
    if not np.all(np.isfinite(gain)):
        raise ValueError(f"{label} must be finite")
    return gain


def assemble_regressors_sare(
    features: RegressorSet,
    K: np.ndarray,
    L: np.ndarray,
    cost: CostSpec,
) -> tuple[np.ndarray, np.ndarray]:
    n, m1, m2 = features.n, features.m1, features.m2
    K = _check_gain(K, m1, n, "K")
    L = _check_gain(L, m2, n, "L")
    gamma2 = cost.gamma**2
    products = features.integrated_state_products()
    I_mu = half_quadratic(K @ products @ K.T)
    psi = np.hstack(
        [
            features.delta_x,
            -2.0 * (features.I_xu + _state_feedback_block(features, K)),
            -2.0 * gamma2 * (features.I_xv - _state_feedback_block(features, L)),
            -(features.I_u - I_mu),
        ]
    )
    weight = symmetrize(cost.Q - gamma2 * L.T @ L + K.T @ cost.R @ K)
    rhs = -features.I_x @ vecm(weight)
    return psi, rhs


def _solve(psi: np.ndarray, rhs: np.ndarray, condition: str) -> tuple[np.ndarray, float]:
    theta, _, rank, _ = linalg.lstsq(psi, rhs, cond=RANK_TOL)
    if rank < psi.shape[1]:
        raise RankConditionError(
            f"insufficient excitation: regressor rank {rank} < {psi.shape[1]}",
            condition=condition,
            ranks={"rank": int(rank), "required": int(psi.shape[1])},
        )
    residual = float(np.linalg.norm(psi @ theta - rhs) / np.sqrt(psi.shape[0]))
    return theta, residual


def lsq_step_sare(
    psi: np.ndarray, rhs: np.ndarray, features: RegressorSet, cost: CostSpec
) -> tuple[ThetaP, np.ndarray, float]:
    """Solve one stochastic regression; returns ``(theta, K_next, residual)``."""
    vector, residual = _solve(psi, rhs, condition="stochastic")
    theta = ThetaP.from_vector(vector, features.n, features.m1, features.m2)
    return theta, theta.control_gain(cost.R), residual


def assemble_regressors_pi(
    expected: RegressorSet,
    K_pi: np.ndarray,
    L_pi: np.ndarray,
    K_p: np.ndarray,
    L_p: np.ndarray,
    Upsilon: np.ndarray,
    Q_Gamma: np.ndarray,
    gamma: float,
) -> tuple[np.ndarray, np.ndarray]:
    n, m1, m2 = expected.n, expected.m1, expected.m2
    K_pi = _check_gain(K_pi, m1, n, "K_pi")
    L_pi = _check_gain(L_pi, m2, n, "L_pi")
    K_p = _check_gain(K_p, m1, n, "K_p")
    L_p = _check_gain(L_p, m2, n, "L_p")
    Upsilon = symmetrize(as_matrix(Upsilon, "Upsilon"))
    gamma2 = gamma**2
    weighted_inputs = (expected.I_xu.reshape(expected.rows, n, m1) @ Upsilon).reshape(expected.rows, -1)
    psi = np.hstack(
        [
            expected.delta_x,
            -2.0 * (weighted_inputs + _state_feedback_block(expected, Upsilon @ (K_p + K_pi))),
            -2.0 * gamma2 * (expected.I_xv - _state_feedback_block(expected, L_p + L_pi)),
        ]
    )
    weight = symmetrize(-Q_Gamma - gamma2 * L_pi.T @ L_pi + K_pi.T @ Upsilon @ K_pi)
    rhs = -expected.I_x @ vecm(weight)
    return psi, rhs


def lsq_step_are_pi(
    expected: RegressorSet,
    K_pi: np.ndarray,
    L_pi: np.ndarray,
    K_p: np.ndarray,
    L_p: np.ndarray,
    Upsilon: np.ndarray,
    Q_Gamma: np.ndarray,
    gamma: float,
) -> tuple[ThetaPi, float]:
    psi, rhs = assemble_regressors_pi(expected, K_pi, L_pi, K_p, L_p, Upsilon, Q_Gamma, gamma)
    vector, residual = _solve(psi, rhs, condition="deterministic")
    return ThetaPi.from_vector(vector, expected.n, expected.m1, expected.m2), residual


def identify_system_rows(expected: RegressorSet) -> SystemModel:
    """Recover ``A, B, G`` row by row from the mean-trajectory features.

    Row ``j`` uses the probe ``E_j = e_j e_j'``: the increment of ``x_j^2`` over
    a window equals ``2 [I_xx(e_j (x) I), I_xu(e_j (x) I), I_xv(e_j (x) I)]``
    applied to ``[A_j, B_j, G_j]'``. The returned model has no diffusion
    channel since the mean trajectory does not see it.
    """
    n, m1, m2 = expected.n, expected.m1, expected.m2
    diagonal = {int(i): position for position, (i, j) in enumerate(zip(*np.triu_indices(n))) if i == j}
    A = np.zeros((n, n))
    B = np.zeros((n, m1))
    G = np.zeros((n, m2))
    for j in range(n):
        phi = 2.0 * np.hstack(
            [
                expected.I_xx[:, j * n : (j + 1) * n],
                expected.I_xu[:, j * m1 : (j + 1) * m1],
                expected.I_xv[:, j * m2 : (j + 1) * m2],
            ]
        )
        target = expected.delta_x[:, diagonal[j]]
        row, _, rank, _ = linalg.lstsq(phi, target, cond=RANK_TOL)
        if rank < phi.shape[1]:
            raise RankConditionError(
                f"cannot identify row {j + 1} of [A, B, G]: rank {rank} < {phi.shape[1]}",
                condition="identification",
                ranks={"rank": int(rank), "required": int(phi.shape[1])},
            )
        A[j] = row[:n]
        B[j] = row[n : n + m1]
        G[j] = row[n + m1 :]
    LOGGER.info("Identified drift matrices from %d windows", expected.rows)
    return SystemModel(A=A, B=B, G=G, C=np.zeros((n, n)), D=np.zeros((n, m1)))


@dataclass(slots=True)
class LearnedStep:
    P: np.ndarray
    K: np.ndarray
    L: np.ndarray
    residual: float
    Lambda: Optional[np.ndarray] = None


Regression = Callable[[np.ndarray, np.ndarray], LearnedStep]


@dataclass(slots=True)
class LearnedSolution:
    """Outcome of one learned dual loop; ``lambdas[k-1]`` is the last ``Lambda`` of outer step ``k``."""

    P: np.ndarray
    K: np.ndarray
    L: np.ndarray
    trace: IterationTrace
    lambdas: List[np.ndarray] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return self.trace.outer_count

    @property
    def Lambda(self) -> Optional[np.ndarray]:
        return self.lambdas[-1] if self.lambdas else None

    def as_dict(self) -> Dict[str, object]:
        payload: Dict[str, object] = {
            "P": self.P.tolist(),
            "K": self.K.tolist(),
            "L": self.L.tolist(),
            "iterations": self.iterations,
        }
        if self.Lambda is not None:
            payload["Lambda"] = self.Lambda.tolist()
        return payload


def learned_dual_loop(
    regress: Regression,
    problem: RiccatiProblem,
    cfg: DualLoopConfig,
    init: InitProvider,
) -> LearnedSolution:
    """Outer/inner logic of the model-based solver with regressions as evaluation steps.

    ``problem`` only supplies dimensions and the initial admissible gains, it is
    built on the identified model.
    """
    _, L = problem.zero_gains()
    warm: Optional[np.ndarray] = None
    trace = IterationTrace(label=problem.label)
    lambdas: List[np.ndarray] = []
    for k in range(1, cfg.max_outer + 1):
        K = starting_gain(problem, L, warm, init)
        inner: List[InnerStep] = []
        step: Optional[LearnedStep] = None
        for j in range(1, cfg.max_inner + 1):
            step = regress(K, L)
            if not (np.all(np.isfinite(step.P)) and np.all(np.isfinite(step.K))):
                raise SolverError(f"{problem.label}: regression produced non-finite values", trace=trace)
            change = float(np.linalg.norm(step.K - K, 2))
            inner.append(InnerStep(j=j, P=step.P, K=step.K, gain_change=change, residual=step.residual))
            LOGGER.debug("%s inner j=%d TrP=%.10f |dK|=%.3e", problem.label, j, float(np.trace(step.P)), change)
            K = step.K
            if change < cfg.xi:
                break
        else:
            raise SolverError(
                f"{problem.label}: learned inner loop did not converge in {cfg.max_inner} steps",
                trace=trace,
            )
        assert step is not None
        outer = OuterStep(
            k=k,
            L_in=L,
            P=step.P,
            K=step.K,
            L=step.L,
            gain_change=float(np.linalg.norm(step.L - L, 2)),
            residual=step.residual,
            inner=inner,
        )
        trace.steps.append(outer)
        if step.Lambda is not None:
            lambdas.append(step.Lambda)
        LOGGER.info(
            "%s outer k=%d inner=%d TrP=%.8f |dL|=%.3e",
            problem.label,
            k,
            outer.inner_count,
            outer.trace_P,
            outer.gain_change,
        )
        if outer.gain_change < cfg.xi:
            return LearnedSolution(P=symmetrize(step.P), K=step.K, L=step.L, trace=trace, lambdas=lambdas)
        L = step.L
        warm = step.K
    raise SolverError(f"{problem.label}: learned outer loop did not converge in {cfg.max_outer} steps", trace=trace)


def learned_sare_problem(cost: CostSpec, model: SystemModel) -> RiccatiProblem:
    """Stochastic problem used only for dimensions and initial gains of the learned phase.

    ``model`` carries the identified drift together with the diffusion of the
    plant, so the initial gain is mean-square admissible for the true agents.
    """
    return RiccatiProblem(
        system=model,
        Q=cost.Q,
        R=cost.R,
        gamma=cost.gamma,
        stochastic=True,
        label="learn-sare",
    )


def learn_sare(
    features: RegressorSet,
    cost: CostSpec,
    identified: SystemModel,
    cfg: Optional[DualLoopConfig] = None,
    init: Optional[InitProvider] = None,
) -> LearnedSolution:
    cfg = cfg or DualLoopConfig()
    init = init or LmiInitializer(epsilon=cfg.epsilon_lmi)
    problem = learned_sare_problem(cost, identified)

    def regress(K: np.ndarray, L: np.ndarray) -> LearnedStep:
        psi, rhs = assemble_regressors_sare(features, K, L, cost)
        theta, K_next, residual = lsq_step_sare(psi, rhs, features, cost)
        return LearnedStep(P=theta.P, K=K_next, L=theta.L, residual=residual, Lambda=theta.Lambda)

    return learned_dual_loop(regress, problem, cfg, init)


def learn_pi(
    expected: RegressorSet,
    cost: CostSpec,
    identified: SystemModel,
    sare: LearnedSolution,
    cfg: Optional[DualLoopConfig] = None,
    init: Optional[InitProvider] = None,
) -> LearnedSolution:
    """Mean field phase; consumes ``K_p``, ``L_p`` and ``Lambda`` of the learned stochastic phase."""
    cfg = cfg or DualLoopConfig()
    init = init or LmiInitializer(epsilon=cfg.epsilon_lmi)
    if sare.Lambda is None:
        raise ValueError("the stochastic phase did not record Lambda")
    Upsilon = symmetrize(cost.R + sare.Lambda)
    invert_input_weight(Upsilon)
    Q_Gamma = cost.Q_Gamma
    A_pi = identified.A - identified.B @ sare.K + identified.G @ sare.L
    problem = RiccatiProblem(
        system=identified.deterministic().with_drift(A_pi),
        Q=-Q_Gamma,
        R=Upsilon,
        gamma=cost.gamma,
        stochastic=False,
        label="learn-pi",
    )

    def regress(K: np.ndarray, L: np.ndarray) -> LearnedStep:
        theta, residual = lsq_step_are_pi(expected, K, L, sare.K, sare.L, Upsilon, Q_Gamma, cost.gamma)
        return LearnedStep(P=theta.Pi, K=theta.K, L=theta.L, residual=residual)

    return learned_dual_loop(regress, problem, cfg, init)


def relative_error(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Spectral-norm error, relative unless the reference vanishes."""
    scale = float(np.linalg.norm(reference, 2))
    error = float(np.linalg.norm(np.asarray(estimate) - np.asarray(reference), 2))
    return error / scale if scale > 0 else error


def _step(trace: IterationTrace, k: int) -> OuterStep:
    return trace.steps[min(k, trace.outer_count) - 1]


def relative_error_table(
    model_sare: IterationTrace,
    learned_sare: LearnedSolution,
    D: np.ndarray,
    model_pi: Optional[IterationTrace] = None,
    learned_pi: Optional[LearnedSolution] = None,
) -> List[Dict[str, float]]:
    """Per outer step ``k``: relative errors of the learned iterates against the model-based ones.

    A trace shorter than the table contributes its final iterate to the
    remaining rows.
    """
    D = as_matrix(D, "D")
    with_pi = model_pi is not None and learned_pi is not None
    lengths = [model_sare.outer_count, learned_sare.trace.outer_count]
    if with_pi:
        lengths += [model_pi.outer_count, learned_pi.trace.outer_count]
    if min(lengths) == 0:
        return []
    rows: List[Dict[str, float]] = []
    for k in range(1, max(lengths) + 1):
        reference = _step(model_sare, k)
        learned = _step(learned_sare.trace, k)
        row: Dict[str, float] = {"k": k}
        row["P"] = relative_error(learned.P, reference.P)
        row["L_p"] = relative_error(learned.L, reference.L)
        row["K_p"] = relative_error(learned.K, reference.K)
        if learned_sare.lambdas:
            lam = learned_sare.lambdas[min(k, len(learned_sare.lambdas)) - 1]
            row["Lambda"] = relative_error(lam, D.T @ reference.P @ D)
        else:
            row["Lambda"] = float("nan")
        if with_pi:
            reference_pi = _step(model_pi, k)
            learned_pi_step = _step(learned_pi.trace, k)
            row["Pi"] = relative_error(learned_pi_step.P, reference_pi.P)
            row["L_pi"] = relative_error(learned_pi_step.L, reference_pi.L)
            row["K_pi"] = relative_error(learned_pi_step.K, reference_pi.K)
        else:
            row.update({"Pi": float("nan"), "L_pi": float("nan"), "K_pi": float("nan")})
        rows.append(row)
    return rows
