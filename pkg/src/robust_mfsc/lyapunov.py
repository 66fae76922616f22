"""
Generalized Lyapunov operators on the space of symmetric matrices.

For a closed loop ``A_cl = A - BK + GL`` and noise channel ``C_cl = C - DK``
the operator is ``P -> A_cl'P + P A_cl + C_cl'P C_cl``. It is represented as a
square matrix acting on the half-vectorization ``vecm`` so that stability,
detectability and policy evaluation all reduce to dense linear algebra on a
space of dimension ``n(n+1)/2``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import SolverError
from .model import SystemModel, as_matrix, symmetrize

LOGGER = logging.getLogger(__name__)

STABILITY_MARGIN = 1e-9
DETECTABILITY_TOL = 1e-9
VECM_SYMMETRY_TOL = 1e-12
RESIDUAL_TOL = 1e-10


def sym_dim(n: int) -> int:
    return n * (n + 1) // 2


def vecm(P: np.ndarray, tol: float = VECM_SYMMETRY_TOL) -> np.ndarray:
    """Row-major upper triangle ``[p11, p12, ..., p1n, p22, ..., pnn]``."""
    P = np.asarray(P)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"vecm expects a square matrix, got shape {P.shape}")
    scale = max(1.0, float(np.abs(P).max())) if P.size else 1.0
    if np.abs(P - P.T).max(initial=0.0) > tol * scale:
        raise ValueError("vecm expects a symmetric matrix")
    rows, cols = np.triu_indices(P.shape[0])
    return P[rows, cols].copy()


def unvecm(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    size = v.shape[0]
    n = int(round((np.sqrt(8 * size + 1) - 1) / 2))
    if sym_dim(n) != size:
        raise ValueError(f"length {size} is not a triangular number")
    P = np.zeros((n, n), dtype=v.dtype)
    rows, cols = np.triu_indices(n)
    P[rows, cols] = v
    P[cols, rows] = v
    return P


def symmetric_basis(n: int) -> list[np.ndarray]:
    """Basis ``E_ij`` of symmetric matrices in vecm order."""
    basis = []
    for i, j in zip(*np.triu_indices(n)):
        E = np.zeros((n, n))
        E[i, j] = 1.0
        E[j, i] = 1.0
        basis.append(E)
    return basis


@dataclass(slots=True)
class LyapOperatorSpec:
    """Closed-loop data defining one generalized Lyapunov operator."""

    sys: SystemModel
    K: np.ndarray
    L: np.ndarray
    deterministic: bool = False

    def __post_init__(self) -> None:
        self.K = as_matrix(self.K, "K")
        self.L = as_matrix(self.L, "L")
        if self.K.shape != (self.sys.m1, self.sys.n):
            raise ValueError(f"K must be {self.sys.m1}x{self.sys.n}, got {self.K.shape}")
        if self.L.shape != (self.sys.m2, self.sys.n):
            raise ValueError(f"L must be {self.sys.m2}x{self.sys.n}, got {self.L.shape}")

    @property
    def drift(self) -> np.ndarray:
        return self.sys.A - self.sys.B @ self.K + self.sys.G @ self.L

    @property
    def diffusion(self) -> Optional[np.ndarray]:
        if self.deterministic:
            return None
        return self.sys.C - self.sys.D @ self.K


def apply_generalized_lyapunov(op: LyapOperatorSpec, P: np.ndarray) -> np.ndarray:
    A_cl = op.drift
    result = A_cl.T @ P + P @ A_cl
    noise = op.diffusion
    if noise is not None:
        result = result + noise.T @ P @ noise
    return symmetrize(result)


def apply_adjoint(op: LyapOperatorSpec, Y: np.ndarray) -> np.ndarray:
    """Adjoint with respect to the trace inner product."""
    A_cl = op.drift
    result = A_cl @ Y + Y @ A_cl.T
    noise = op.diffusion
    if noise is not None:
        result = result + noise @ Y @ noise.T
    return symmetrize(result)


def _matrix_of(op: LyapOperatorSpec, apply) -> np.ndarray:
    columns = [vecm(apply(op, E)) for E in symmetric_basis(op.sys.n)]
    return np.column_stack(columns)


def operator_matrix(op: LyapOperatorSpec) -> np.ndarray:
    """Matrix ``M`` with ``vecm(L(P)) = M vecm(P)``."""
    return _matrix_of(op, apply_generalized_lyapunov)


def adjoint_operator_matrix(op: LyapOperatorSpec) -> np.ndarray:
    """Matrix of the adjoint on the same vecm coordinates.

    The coordinates are not orthonormal for the trace inner product, so this
    is similar to, not equal to, the transpose of ``operator_matrix``.
    """
    return _matrix_of(op, apply_adjoint)


def operator_spectrum(op: LyapOperatorSpec) -> np.ndarray:
    try:
        return linalg.eigvals(operator_matrix(op))
    except linalg.LinAlgError as exc:
        raise SolverError(f"eigenvalue computation failed: {exc}") from exc


def spectral_abscissa(op: LyapOperatorSpec) -> float:
    return float(np.max(np.real(operator_spectrum(op))))


def is_ms_stable(op: LyapOperatorSpec) -> bool:
    abscissa = spectral_abscissa(op)
    return bool(np.isfinite(abscissa) and abscissa < -STABILITY_MARGIN)


def solve_generalized_lyapunov(op: LyapOperatorSpec, W: np.ndarray) -> np.ndarray:
    """Solve ``L(P) + W = 0`` for symmetric ``P``."""
    M = operator_matrix(op)
    singular_values = linalg.svdvals(M)
    if singular_values[-1] <= 1e-13 * max(1.0, singular_values[0]):
        raise SolverError("operator on stability boundary")
    try:
        p = linalg.solve(M, -vecm(symmetrize(W)))
    except linalg.LinAlgError as exc:
        raise SolverError("operator on stability boundary") from exc
    P = unvecm(p)
    residual = float(np.linalg.norm(apply_generalized_lyapunov(op, P) + W))
    tolerance = RESIDUAL_TOL * (1.0 + float(np.linalg.norm(W)))
    if not residual <= tolerance:
        raise SolverError(f"Lyapunov solve residual {residual:.3e} above tolerance {tolerance:.3e}")
    return P


def check_exact_detectability(
    sys: SystemModel, Q: np.ndarray, deterministic: bool = False
) -> bool:
    """Eigen-test: no unstable mode of ``P -> A'P + PA + C'PC`` is invisible to ``Q``.

    Only ordinary eigenvectors are inspected; Jordan chains of a defective
    operator are not followed.
    """
    Q = as_matrix(Q, "Q")
    open_loop = LyapOperatorSpec(
        sys=sys,
        K=np.zeros((sys.m1, sys.n)),
        L=np.zeros((sys.m2, sys.n)),
        deterministic=deterministic,
    )
    eigenvalues, eigenvectors = linalg.eig(operator_matrix(open_loop))
    for index, eigenvalue in enumerate(eigenvalues):
        if eigenvalue.real < -STABILITY_MARGIN:
            continue
        mode = unvecm(eigenvectors[:, index])
        invisible = True
        for part in (mode.real, mode.imag):
            size = np.linalg.norm(part)
            if size == 0.0:
                continue
            if np.linalg.norm(Q @ part) > DETECTABILITY_TOL * size:
                invisible = False
        if invisible:
            LOGGER.info("Undetectable mode at eigenvalue %s", eigenvalue)
            return False
    return True
