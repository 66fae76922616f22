"""
Input validation for model and cost data.
"""
from __future__ import annotations

import logging
from typing import List

import numpy as np

from .model import CostSpec, SystemModel, is_pd, is_psd

LOGGER = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10


def _shape_violations(sys: SystemModel, cost: CostSpec) -> List[str]:
    violations: List[str] = []
    n = sys.A.shape[0]
    if sys.A.shape != (n, n):
        violations.append(f"A must be square, got {sys.A.shape}")
    if sys.B.shape[0] != n:
        violations.append(f"B has {sys.B.shape[0]} rows, expected {n}")
    if sys.G.shape[0] != n:
        violations.append(f"G has {sys.G.shape[0]} rows, expected {n}")
    if sys.C.shape != (n, n):
        violations.append(f"C must be {n}x{n}, got {sys.C.shape}")
    if sys.D.shape != (n, sys.B.shape[1]):
        violations.append(f"D must be {n}x{sys.B.shape[1]}, got {sys.D.shape}")
    if cost.Q.shape != (n, n):
        violations.append(f"Q must be {n}x{n}, got {cost.Q.shape}")
    if cost.Gamma.shape != (n, n):
        violations.append(f"Gamma must be {n}x{n}, got {cost.Gamma.shape}")
    m1 = sys.B.shape[1]
    if cost.R.shape != (m1, m1):
        violations.append(f"R must be {m1}x{m1}, got {cost.R.shape}")
    return violations


def validate_model(sys: SystemModel, cost: CostSpec) -> List[str]:
    """
    Check dimensions and weight definiteness.

    Returns:
        List of violated invariants; an empty list means the data is usable.
    """
    violations = _shape_violations(sys, cost)
    for name, matrix in (
        ("A", sys.A),
        ("B", sys.B),
        ("G", sys.G),
        ("C", sys.C),
        ("D", sys.D),
        ("Q", cost.Q),
        ("R", cost.R),
        ("Gamma", cost.Gamma),
    ):
        if not np.all(np.isfinite(matrix)):
            violations.append(f"{name} has non-finite entries")
    if not np.isfinite(cost.gamma) or cost.gamma <= 0:
        violations.append("gamma must be positive")
    if violations:
        # definiteness checks below assume square finite weights
        LOGGER.debug("Model validation failed early: %s", violations)
        return violations

    if np.abs(cost.Q - cost.Q.T).max() > SYMMETRY_TOL:
        violations.append("Q not symmetric")
    elif not is_psd(cost.Q):
        violations.append("Q not positive semidefinite")
    if np.abs(cost.R - cost.R.T).max() > SYMMETRY_TOL:
        violations.append("R not symmetric")
    elif not is_pd(cost.R):
        violations.append("R not positive definite")
    return violations

