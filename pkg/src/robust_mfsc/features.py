"""
Integral features of measured trajectories.

Quadratic forms are paired with half-vectorized matrices through
``phi(x) = vecm(2 x x' - diag(x)^2)``, so that ``x'Px = phi(x) . vecm(P)``.
Cross products use ``x (x) y`` in numpy ``kron`` order (block ``b`` equals
``x_b * y``), which pairs with the column-major ``vec`` of an ``m x n`` gain.

Two flavours are produced from one ``TrajectoryBatch``:

* ``sample-mean``: products are formed per path and averaged over paths,
* ``expected``: paths are averaged first and products are formed from the
  averaged trajectory (the deterministic mean dynamics).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy import integrate

from .config import IrlConfig, QUADRATURES
from .lyapunov import sym_dim
from .simulation import TrajectoryBatch

LOGGER = logging.getLogger(__name__)

RANK_TOL = 1e-8
FEATURE_KINDS = ("sample-mean", "expected")


@dataclass(slots=True)
class DataWindow:
    """Windows ``[t_k, t_k + T]`` with ``t_k = t1 + (k - 1) Ts`` for ``k = 1..count``."""

    t1: float
    count: int
    T: float
    Ts: float

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("at least one data window is required")
        if not (self.T > 0 and self.Ts > 0):
            raise ValueError("window length and sampling period must be positive")
        ratio = self.T / self.Ts
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError("window length must be a multiple of the sampling period")

    @classmethod
    def covering(cls, t1: float, tl: float, T: float, Ts: float) -> "DataWindow":
        """All windows that start every ``Ts`` and end no later than ``tl``."""
        count = int(np.floor((tl - t1 - T) / Ts + 1e-9)) + 1
        return cls(t1=t1, count=count, T=T, Ts=Ts)

    @classmethod
    def from_config(cls, irl: IrlConfig) -> "DataWindow":
        return cls.covering(irl.t1, irl.tl, irl.T, irl.Ts)

    @property
    def starts(self) -> np.ndarray:
        return self.t1 + self.Ts * np.arange(self.count)

    @property
    def end(self) -> float:
        return float(self.starts[-1] + self.T)

    def grid_indices(self, dt: float, samples: int) -> tuple[np.ndarray, np.ndarray]:
        """Start and end indices of every window on a grid of ``samples`` points."""

        def to_steps(value: float, label: str) -> int:
            steps = value / dt
            if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
                raise ValueError(f"{label}={value} is not a multiple of the simulation step {dt}")
            return int(round(steps))

        first = to_steps(self.t1, "t1")
        stride = to_steps(self.Ts, "Ts")
        width = to_steps(self.T, "T")
        if stride < 1 or width < 1:
            raise ValueError("windows are finer than the simulation grid")
        begin = first + stride * np.arange(self.count)
        finish = begin + width
        if first < 0 or finish[-1] > samples - 1:
            raise ValueError(
                f"data windows reach t={self.end:.4f}, beyond the simulated horizon "
                f"{(samples - 1) * dt:.4f}"
            )
        return begin, finish


@dataclass(slots=True)
class RegressorSet:
    """Window features; each array has one row per window."""

    delta_x: np.ndarray
    I_x: np.ndarray
    I_xx: np.ndarray
    I_xu: np.ndarray
    I_xv: np.ndarray
    I_u: np.ndarray
    n: int
    m1: int
    m2: int
    kind: str = "sample-mean"

    @property
    def rows(self) -> int:
        return int(self.delta_x.shape[0])

    def integrated_state_products(self) -> np.ndarray:
        """``I_xx`` reshaped to one symmetric ``n x n`` matrix per window."""
        blocks = self.I_xx.reshape(self.rows, self.n, self.n)
        return (blocks + blocks.transpose(0, 2, 1)) / 2.0

    def sliced(self, rows: np.ndarray) -> "RegressorSet":
        return RegressorSet(
            delta_x=self.delta_x[rows],
            I_x=self.I_x[rows],
            I_xx=self.I_xx[rows],
            I_xu=self.I_xu[rows],
            I_xv=self.I_xv[rows],
            I_u=self.I_u[rows],
            n=self.n,
            m1=self.m1,
            m2=self.m2,
            kind=self.kind,
        )


def half_quadratic(products: np.ndarray) -> np.ndarray:
    """``vecm(2M - diag(M))`` for a stack of symmetric matrices ``M`` (last two axes)."""
    size = products.shape[-1]
    rows, cols = np.triu_indices(size)
    weights = np.where(rows == cols, 1.0, 2.0)
    return products[..., rows, cols] * weights


def _cumulative(values: np.ndarray, times: np.ndarray, quadrature: str) -> np.ndarray:
    if quadrature == "trapezoid":
        return integrate.cumulative_trapezoid(values, times, axis=0, initial=0.0)
    if quadrature == "left":
        steps = np.diff(times)
        shape = (-1,) + (1,) * (values.ndim - 1)
        increments = values[:-1] * steps.reshape(shape)
        return np.concatenate([np.zeros_like(values[:1]), np.cumsum(increments, axis=0)])
    raise ValueError(f"unknown quadrature {quadrature!r}, expected one of {QUADRATURES}")


def _products(left: np.ndarray, right: np.ndarray, kind: str) -> np.ndarray:
    """Per-time ``E[left right']`` with shape ``(T, a, b)``."""
    if kind == "sample-mean":
        return np.einsum("pti,ptj->tij", left, right, optimize=True) / left.shape[0]
    mean_left = left.mean(axis=0)
    mean_right = right.mean(axis=0)
    return np.einsum("ti,tj->tij", mean_left, mean_right)


def integral_features(
    batch: TrajectoryBatch,
    window: DataWindow,
    kind: str = "sample-mean",
    quadrature: str = "trapezoid",
) -> RegressorSet:
    if kind not in FEATURE_KINDS:
        raise ValueError(f"unknown feature kind {kind!r}, expected one of {FEATURE_KINDS}")
    if batch.n_samples < 1:
        raise ValueError("empty trajectory batch")
    begin, finish = window.grid_indices(batch.dt, batch.times.size)
    n = batch.states.shape[2]
    m1 = batch.controls.shape[2]
    m2 = batch.disturbances.shape[2]

    xx = _products(batch.states, batch.states, kind)
    xx = (xx + xx.transpose(0, 2, 1)) / 2.0
    xu = _products(batch.states, batch.controls, kind)
    xv = _products(batch.states, batch.disturbances, kind)
    uu = _products(batch.controls, batch.controls, kind)
    uu = (uu + uu.transpose(0, 2, 1)) / 2.0

    def windowed(values: np.ndarray) -> np.ndarray:
        flat = values.reshape(values.shape[0], -1)
        running = _cumulative(flat, batch.times, quadrature)
        return running[finish] - running[begin]

    phi = half_quadratic(xx)
    features = RegressorSet(
        delta_x=phi[finish] - phi[begin],
        I_x=windowed(phi),
        I_xx=windowed(xx),
        I_xu=windowed(xu),
        I_xv=windowed(xv),
        I_u=windowed(half_quadratic(uu)),
        n=n,
        m1=m1,
        m2=m2,
        kind=kind,
    )
    LOGGER.debug(
        "Built %s features: %d windows, %d paths, quadrature=%s",
        kind,
        features.rows,
        batch.n_samples,
        quadrature,
    )
    return features


def numerical_rank(matrix: np.ndarray, tol: float = RANK_TOL) -> int:
    if matrix.size == 0:
        return 0
    singular = np.linalg.svd(matrix, compute_uv=False)
    if singular[0] == 0:
        return 0
    return int(np.sum(singular > tol * singular[0]))


@dataclass(slots=True)
class RankReport:
    stochastic_ok: bool
    deterministic_ok: bool
    stochastic_rank: int
    stochastic_required: int
    deterministic_rank: int
    deterministic_required: int

    @property
    def passed(self) -> bool:
        return self.stochastic_ok and self.deterministic_ok

    def failures(self) -> list[str]:
        messages = []
        if not self.stochastic_ok:
            messages.append(
                "stochastic excitation condition failed: rank "
                f"{self.stochastic_rank} < {self.stochastic_required}"
            )
        if not self.deterministic_ok:
            messages.append(
                "mean-trajectory excitation condition failed: rank "
                f"{self.deterministic_rank} < {self.deterministic_required}"
            )
        return messages

    def as_dict(self) -> Dict[str, object]:
        return {
            "stochastic_ok": self.stochastic_ok,
            "deterministic_ok": self.deterministic_ok,
            "stochastic_rank": self.stochastic_rank,
            "stochastic_required": self.stochastic_required,
            "deterministic_rank": self.deterministic_rank,
            "deterministic_required": self.deterministic_required,
        }


def rank_conditions(
    features: RegressorSet,
    expected: Optional[RegressorSet] = None,
    tol: float = RANK_TOL,
) -> RankReport:
    """Excitation tests on ``[I_x, I_xu, I_xv, I_u]`` and ``[I_x, I_xu, I_xv]`` of the mean path."""
    expected = expected if expected is not None else features
    n, m1, m2 = features.n, features.m1, features.m2
    stochastic_required = sym_dim(n) + n * (m1 + m2) + sym_dim(m1)
    deterministic_required = sym_dim(n) + n * (m1 + m2)
    stochastic_rank = numerical_rank(
        np.hstack([features.I_x, features.I_xu, features.I_xv, features.I_u]), tol
    )
    deterministic_rank = numerical_rank(np.hstack([expected.I_x, expected.I_xu, expected.I_xv]), tol)
    return RankReport(
        stochastic_ok=stochastic_rank >= stochastic_required,
        deterministic_ok=deterministic_rank >= deterministic_required,
        stochastic_rank=stochastic_rank,
        stochastic_required=stochastic_required,
        deterministic_rank=deterministic_rank,
        deterministic_required=deterministic_required,
    )
