"""
Problem data for the robust mean field social control model.

Every agent in the population shares the same linear stochastic dynamics
``dx = (Ax + Bu + Gv)dt + (Cx + Du)dw`` and the same weights ``Q, R, Gamma``
together with the attenuation level ``gamma``. The helpers below compute the
constant matrices that the deterministic (mean field) Riccati equation and
the closed-loop mean field ODE are built from.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
from scipy import linalg

from .errors import SolverError

LOGGER = logging.getLogger(__name__)

PSD_TOL = 1e-10


def as_matrix(value: object, name: str = "matrix") -> np.ndarray:
    """Coerce scalars and nested lists to a 2-D float array."""
    array = np.array(value, dtype=float)
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {array.shape}")
    return array


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return (matrix + matrix.T) / 2.0


def _eig_bounds(matrix: np.ndarray) -> tuple[float, float]:
    eigenvalues = linalg.eigvalsh(symmetrize(matrix))
    return float(eigenvalues[0]), float(eigenvalues[-1])


def is_psd(matrix: np.ndarray, tol: float = PSD_TOL) -> bool:
    """psd test scaled by the largest eigenvalue magnitude."""
    lowest, highest = _eig_bounds(matrix)
    return lowest > -tol * max(1.0, abs(highest))


def is_pd(matrix: np.ndarray, tol: float = PSD_TOL) -> bool:
    lowest, highest = _eig_bounds(matrix)
    return lowest > tol * max(1.0, abs(highest))


def min_eig(matrix: np.ndarray) -> float:
    return _eig_bounds(matrix)[0]


@dataclass(slots=True)
class SystemModel:
    """The quintuple ``[A, B, G | C, D]`` of the agent dynamics."""

    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self) -> None:
        self.A = as_matrix(self.A, "A")
        self.B = as_matrix(self.B, "B")
        self.G = as_matrix(self.G, "G")
        self.C = as_matrix(self.C, "C")
        self.D = as_matrix(self.D, "D")

    @property
    def n(self) -> int:
        return int(self.A.shape[0])

    @property
    def m1(self) -> int:
        return int(self.B.shape[1])

    @property
    def m2(self) -> int:
        return int(self.G.shape[1])

    def deterministic(self) -> "SystemModel":
        """Same drift, with the diffusion channel removed."""
        return SystemModel(
            A=self.A.copy(),
            B=self.B.copy(),
            G=self.G.copy(),
            C=np.zeros_like(self.C),
            D=np.zeros_like(self.D),
        )

    def with_drift(self, A: np.ndarray) -> "SystemModel":
        return SystemModel(A=A, B=self.B.copy(), G=self.G.copy(), C=self.C.copy(), D=self.D.copy())

    def with_diffusion(self, C: np.ndarray, D: np.ndarray) -> "SystemModel":
        return SystemModel(A=self.A.copy(), B=self.B.copy(), G=self.G.copy(), C=C, D=D)

    def as_dict(self) -> Dict[str, List[List[float]]]:
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "G": self.G.tolist(),
            "C": self.C.tolist(),
            "D": self.D.tolist(),
        }


@dataclass(slots=True)
class CostSpec:
    """Social cost weights and the disturbance attenuation level."""

    Q: np.ndarray
    R: np.ndarray
    Gamma: np.ndarray
    gamma: float = 1.0

    def __post_init__(self) -> None:
        self.Q = as_matrix(self.Q, "Q")
        self.R = as_matrix(self.R, "R")
        self.Gamma = as_matrix(self.Gamma, "Gamma")
        self.gamma = float(self.gamma)

    @property
    def Q_Gamma(self) -> np.ndarray:
        """Coupling weight ``-Gamma'Q Gamma + Gamma'Q + Q Gamma``."""
        Q, Gamma = self.Q, self.Gamma
        return symmetrize(-Gamma.T @ Q @ Gamma + Gamma.T @ Q + Q @ Gamma)

    def as_dict(self) -> Dict[str, object]:
        return {
            "Q": self.Q.tolist(),
            "R": self.R.tolist(),
            "Gamma": self.Gamma.tolist(),
            "gamma": self.gamma,
        }


@dataclass(slots=True)
class DerivedCost:
    """Constants of the deterministic equation, fixed once ``P*`` is known."""

    Upsilon: np.ndarray
    A_s: np.ndarray
    Q_Gamma: np.ndarray
    Q_s: np.ndarray


@dataclass(slots=True)
class GainPair:
    K: np.ndarray
    L: np.ndarray

    def __post_init__(self) -> None:
        self.K = as_matrix(self.K, "K")
        self.L = as_matrix(self.L, "L")
        if not (np.all(np.isfinite(self.K)) and np.all(np.isfinite(self.L))):
            raise ValueError("Gain matrices must be finite.")


@dataclass(slots=True)
class StrategyGains:
    """Gains of the decentralized strategies used across the population."""

    K_p: np.ndarray
    K_pi: np.ndarray
    L_p: np.ndarray
    L_pi: np.ndarray
    metadata: Dict[str, float] = field(default_factory=dict)

    @property
    def mean_field_feedback(self) -> GainPair:
        """Gains that drive the expected state: ``K_p + K_pi`` and ``L_p + L_pi``."""
        return GainPair(K=self.K_p + self.K_pi, L=self.L_p + self.L_pi)

    def as_dict(self) -> Dict[str, object]:
        return {
            "K_p": self.K_p.tolist(),
            "K_pi": self.K_pi.tolist(),
            "L_p": self.L_p.tolist(),
            "L_pi": self.L_pi.tolist(),
            "metadata": dict(self.metadata),
        }


def invert_input_weight(weight: np.ndarray, label: str = "Upsilon") -> np.ndarray:
    """Inverse of an input weight, refusing near-singular matrices."""
    if not np.all(np.isfinite(weight)) or not is_pd(weight):
        raise SolverError(f"{label} not invertible")
    condition = np.linalg.cond(weight)
    if not np.isfinite(condition) or condition > 1e12:
        raise SolverError(f"{label} not invertible")
    return linalg.inv(weight)


def derived_cost_quantities(
    sys: SystemModel, cost: CostSpec, P_star: np.ndarray
) -> DerivedCost:
    P = symmetrize(as_matrix(P_star, "P_star"))
    Upsilon = symmetrize(cost.R + sys.D.T @ P @ sys.D)
    Upsilon_inv = invert_input_weight(Upsilon)
    A_s = sys.A - sys.B @ Upsilon_inv @ sys.D.T @ P @ sys.C
    Q_Gamma = cost.Q_Gamma
    cross = sys.C.T @ P @ sys.D
    Q_s = symmetrize(
        cost.Q - Q_Gamma + sys.C.T @ P @ sys.C - cross @ Upsilon_inv @ cross.T
    )
    if min_eig(Q_s) < -PSD_TOL * max(1.0, float(np.abs(Q_s).max())):
        LOGGER.warning("Q_s has a negative eigenvalue %.3e", min_eig(Q_s))
    return DerivedCost(Upsilon=Upsilon, A_s=A_s, Q_Gamma=Q_Gamma, Q_s=Q_s)


def closed_loop_mean_field_matrix(
    sys: SystemModel,
    cost: CostSpec,
    P_star: np.ndarray,
    S_star: np.ndarray,
) -> np.ndarray:
    """Drift of the mean field ODE ``d x_bar = A_mf x_bar dt``."""
    P = symmetrize(as_matrix(P_star, "P_star"))
    S = symmetrize(as_matrix(S_star, "S_star"))
    Upsilon = symmetrize(cost.R + sys.D.T @ P @ sys.D)
    Upsilon_inv = invert_input_weight(Upsilon)
    K_s = Upsilon_inv @ sys.B.T @ S
    L_s = sys.G.T @ S / cost.gamma**2
    return sys.A - sys.B @ (K_s + Upsilon_inv @ sys.D.T @ P @ sys.C) + sys.G @ L_s


def spectral_abscissa_of(matrix: np.ndarray) -> float:
    return float(np.max(np.real(linalg.eigvals(matrix))))
