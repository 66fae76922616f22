"""
Inexact dual-loop iterations and the small-disturbance ISS sweep.

The harness re-runs the stochastic dual loop while injecting a bounded
perturbation after every disturbance-gain update (outer) or control-gain
update (inner), then records how far the iterates settle from the exact
solution. For a well-posed problem the steady error grows like the square of
the perturbation size and the iteration never leaves the admissible set
below some breakdown magnitude.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.stats import spearmanr
from sklearn.linear_model import LinearRegression
from tqdm import tqdm

from .config import DISTRIBUTIONS, DISTURBANCE_MODES, DualLoopConfig, RobustConfig
from .errors import SolverError
from .lyapunov import adjoint_operator_matrix, unvecm, vecm
from .model import CostSpec, SystemModel
from .riccati import (
    InitProvider,
    IterationTrace,
    RiccatiProblem,
    RiccatiSolution,
    starting_gain,
    dual_loop,
    inner_loop,
    outer_step,
)
from .stabilizer import LmiInitializer

LOGGER = logging.getLogger(__name__)

# bound on the post-transient error as a multiple of its steady level
ISS_GAIN = 10.0

Reference = tuple[RiccatiSolution, IterationTrace]


@dataclass(slots=True)
class DisturbanceSchedule:
    magnitude: float = 0.0
    mode: str = "per-outer"
    distribution: str = "fixed"
    seed: int = 0

    def __post_init__(self) -> None:
        if not np.isfinite(self.magnitude) or self.magnitude < 0:
            raise ValueError("disturbance magnitude must be finite and non-negative")
        if self.mode not in DISTURBANCE_MODES:
            raise ValueError(f"unknown disturbance mode {self.mode!r}")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown disturbance distribution {self.distribution!r}")

    @property
    def perturbs_outer(self) -> bool:
        return self.magnitude > 0 and self.mode in ("per-outer", "both")

    @property
    def perturbs_inner(self) -> bool:
        return self.magnitude > 0 and self.mode in ("per-inner", "both")

    def stream(
        self,
        shape: tuple[int, int],
        channel: int = 0,
        direction: Optional[np.ndarray] = None,
    ) -> Callable[[int], np.ndarray]:
        """Perturbation generator with Frobenius norm equal to the magnitude."""
        rng = np.random.default_rng(np.random.SeedSequence(self.seed).spawn(2)[channel])
        if self.distribution == "worst" and direction is not None:
            unit = direction / np.linalg.norm(direction)
        else:
            unit = np.ones(shape) / np.sqrt(shape[0] * shape[1])

        def draw(_: int) -> np.ndarray:
            if self.distribution == "random":
                sample = rng.standard_normal(shape)
                return self.magnitude * sample / np.linalg.norm(sample)
            return self.magnitude * unit

        return draw


@dataclass(slots=True)
class RobustnessEntry:
    magnitude: float
    errors: List[float] = field(default_factory=list)
    trace_gaps: List[float] = field(default_factory=list)
    steady_error: float = float("nan")
    steady_trace_gap: float = float("nan")
    breakdown: bool = False
    reason: str = ""
    fit: Optional[Dict[str, float]] = None

    def as_dict(self) -> Dict[str, object]:
        return {
            "magnitude": self.magnitude,
            "errors": list(self.errors),
            "steady_error": self.steady_error,
            "steady_trace_gap": self.steady_trace_gap,
            "breakdown": self.breakdown,
            "reason": self.reason,
            "fit": self.fit,
        }


@dataclass(slots=True)
class RobustnessReport:
    loop: str
    mode: str
    distribution: str
    entries: List[RobustnessEntry] = field(default_factory=list)

    def sorted_entries(self) -> List[RobustnessEntry]:
        return sorted(self.entries, key=lambda entry: entry.magnitude)

    def breakdown_magnitude(self) -> Optional[float]:
        for entry in self.sorted_entries():
            if entry.breakdown:
                return entry.magnitude
        return None

    def invariant_violations(self, window: int = 5) -> List[str]:
        return _report_violations(self, window)

    def stable_entries(self) -> List[RobustnessEntry]:
        """Entries strictly below the first breakdown."""
        limit = self.breakdown_magnitude()
        return [
            entry
            for entry in self.sorted_entries()
            if not entry.breakdown and (limit is None or entry.magnitude < limit)
        ]

    def quadratic_coefficient(self) -> Optional[float]:
        """Least-squares ``c`` in ``steady ~ c * magnitude^2``."""
        entries = [entry for entry in self.stable_entries() if entry.magnitude > 0]
        if not entries:
            return None
        features = np.array([[entry.magnitude**2] for entry in entries])
        targets = np.array([entry.steady_error for entry in entries])
        model = LinearRegression(fit_intercept=False).fit(features, targets)
        return float(model.coef_[0])

    def loglog_slope(self) -> Optional[float]:
        entries = [
            entry
            for entry in self.stable_entries()
            if entry.magnitude > 0 and np.isfinite(entry.steady_error) and entry.steady_error > 1e-13
        ]
        if len(entries) < 2:
            return None
        x = np.log([[entry.magnitude] for entry in entries])
        y = np.log([entry.steady_error for entry in entries])
        return float(LinearRegression().fit(x, y).coef_[0])

    def as_dict(self) -> Dict[str, object]:
        return {
            "loop": self.loop,
            "mode": self.mode,
            "distribution": self.distribution,
            "entries": [entry.as_dict() for entry in self.sorted_entries()],
            "breakdown_magnitude": self.breakdown_magnitude(),
            "c_hat": self.quadratic_coefficient(),
            "loglog_slope": self.loglog_slope(),
        }


def _tight(cfg: DualLoopConfig, robust: RobustConfig) -> DualLoopConfig:
    return replace(cfg, xi=min(cfg.xi, robust.inner_xi))


def exact_reference(
    sys: SystemModel,
    cost: CostSpec,
    cfg: DualLoopConfig,
    robust: Optional[RobustConfig] = None,
    init: Optional[InitProvider] = None,
) -> Reference:
    """Disturbance-free solve at the harness tolerance."""
    robust = robust or RobustConfig()
    tight = _tight(cfg, robust)
    return dual_loop(RiccatiProblem.sare(sys, cost), tight, init or LmiInitializer(epsilon=cfg.epsilon_lmi))


def _finish(entry: RobustnessEntry, window: int) -> RobustnessEntry:
    if not entry.breakdown and len(entry.errors) >= window:
        entry.steady_error = float(np.mean(entry.errors[-window:]))
        entry.steady_trace_gap = float(np.mean(entry.trace_gaps[-window:]))
    return entry


def run_inexact_outer(
    sys: SystemModel,
    cost: CostSpec,
    cfg: DualLoopConfig,
    sched: DisturbanceSchedule,
    robust: Optional[RobustConfig] = None,
    init: Optional[InitProvider] = None,
    reference: Optional[Reference] = None,
) -> RobustnessReport:
    robust = robust or RobustConfig()
    init = init or LmiInitializer(epsilon=cfg.epsilon_lmi)
    tight = _tight(cfg, robust)
    problem = RiccatiProblem.sare(sys, cost)
    solution, _ = reference or exact_reference(sys, cost, cfg, robust, init)
    P_star = solution.P

    draw_L = sched.stream((sys.m2, sys.n), channel=0)
    draw_K = sched.stream((sys.m1, sys.n), channel=1)
    perturb_K = draw_K if sched.perturbs_inner else None
    inner_steps = robust.iterations if sched.perturbs_inner else None

    entry = RobustnessEntry(magnitude=sched.magnitude)
    L = np.zeros((sys.m2, sys.n))
    warm: Optional[np.ndarray] = None
    for k in range(1, robust.iterations + 1):
        try:
            step = outer_step(
                problem, k, L, warm, tight, init, inner_steps=inner_steps, perturb=perturb_K
            )
        except SolverError as exc:
            entry.breakdown, entry.reason = True, f"k={k}: {exc}"
            break
        error = float(np.linalg.norm(P_star - step.P))
        if not np.isfinite(error) or error > robust.error_cap:
            entry.breakdown, entry.reason = True, f"k={k}: error {error:.3e} above cap"
            break
        entry.errors.append(error)
        entry.trace_gaps.append(float(np.trace(P_star - step.P)))
        L = step.L + draw_L(k) if sched.perturbs_outer else step.L
        warm = step.K
    if entry.breakdown:
        LOGGER.info("Outer breakdown at magnitude %.3e (%s)", sched.magnitude, entry.reason)
    report = RobustnessReport(loop="outer", mode=sched.mode, distribution=sched.distribution)
    report.entries.append(_finish(entry, robust.steady_window))
    return report


def worst_inner_direction(problem: RiccatiProblem, K: np.ndarray, L: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Unit gain perturbation maximising the first-order trace increase.

    ``Tr(P_{K+d} - P_K) ~ Tr(R_p d Y d')`` with ``L*(Y) = -I``, which is
    maximised by the outer product of the top eigenvectors of ``R_p`` and ``Y``.
    """
    op = problem.operator(K, L)
    adjoint = adjoint_operator_matrix(op)
    Y = unvecm(linalg.solve(adjoint, -vecm(np.eye(problem.n))))
    _, y_vectors = linalg.eigh(Y)
    _, r_vectors = linalg.eigh(problem.input_weight(P))
    return np.outer(r_vectors[:, -1], y_vectors[:, -1])


def _geometric_fit(errors: Sequence[float]) -> Optional[Dict[str, float]]:
    """Fit ``ell * alpha^j + kappa`` to an error sequence."""
    values = np.asarray(errors, dtype=float)
    if values.size < 4 or not np.all(np.isfinite(values)):
        return None
    steps = np.arange(1, values.size + 1, dtype=float)

    def model(j, ell, alpha, kappa):
        return ell * alpha**j + kappa

    try:
        params, _ = optimize.curve_fit(
            model,
            steps,
            values,
            p0=(max(values[0], 1e-16), 0.5, max(values[-1], 0.0)),
            bounds=([0.0, 0.0, 0.0], [np.inf, 1.0, np.inf]),
            maxfev=5000,
        )
    except (RuntimeError, ValueError) as exc:
        LOGGER.debug("Geometric fit failed: %s", exc)
        return None
    residual = float(np.linalg.norm(model(steps, *params) - values))
    return {"ell": float(params[0]), "alpha": float(params[1]), "kappa": float(params[2]), "residual": residual}


def run_inexact_inner(
    sys: SystemModel,
    cost: CostSpec,
    cfg: DualLoopConfig,
    sched: DisturbanceSchedule,
    k_fixed: int = 1,
    robust: Optional[RobustConfig] = None,
    init: Optional[InitProvider] = None,
    reference: Optional[Reference] = None,
) -> RobustnessReport:
    robust = robust or RobustConfig()
    init = init or LmiInitializer(epsilon=cfg.epsilon_lmi)
    tight = _tight(cfg, robust)
    problem = RiccatiProblem.sare(sys, cost)
    _, trace = reference or exact_reference(sys, cost, cfg, robust, init)
    k = max(1, min(k_fixed, trace.outer_count))
    context = trace.steps[k - 1]
    P_limit = context.P
    warm = trace.steps[k - 2].K if k > 1 else None
    K0 = starting_gain(problem, context.L_in, warm, init)

    direction = None
    if sched.distribution == "worst":
        direction = worst_inner_direction(problem, context.K, context.L_in, P_limit)
    draw = sched.stream((sys.m1, sys.n), channel=1, direction=direction)
    entry = RobustnessEntry(magnitude=sched.magnitude)
    try:
        result = inner_loop(
            problem,
            context.L_in,
            K0,
            tight,
            fixed_steps=robust.iterations,
            perturb=draw if sched.magnitude > 0 else None,
        )
        steps = result.steps
    except SolverError as exc:
        entry.breakdown, entry.reason = True, str(exc)
        steps = exc.trace if isinstance(exc.trace, list) else []
    for inner in steps:
        error = float(np.linalg.norm(inner.P - P_limit))
        if not np.isfinite(error) or error > robust.error_cap:
            entry.breakdown, entry.reason = True, f"j={inner.j}: error {error:.3e} above cap"
            break
        entry.errors.append(error)
        entry.trace_gaps.append(float(np.trace(inner.P - P_limit)))
    if not entry.breakdown:
        entry.fit = _geometric_fit(entry.errors)
    report = RobustnessReport(loop="inner", mode="per-inner", distribution=sched.distribution)
    report.entries.append(_finish(entry, robust.steady_window))
    return report


@dataclass(slots=True)
class IssRow:
    magnitude: float
    steady_error_outer: float
    steady_error_inner: float
    breakdown_outer: bool
    breakdown_inner: bool


@dataclass(slots=True)
class IssSummary:
    outer: RobustnessReport
    inner: RobustnessReport
    rows: List[IssRow] = field(default_factory=list)

    def invariant_violations(self, window: int = 5) -> List[str]:
        violations: List[str] = []
        for report in (self.outer, self.inner):
            violations.extend(report.invariant_violations(window))
        return violations

    def write_csv(self, destination: Path) -> None:
        destination.parent.mkdir(parents=True, exist_ok=True)
        with destination.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(
                ["magnitude", "steady_error_outer", "steady_error_inner", "breakdown_outer", "breakdown_inner"]
            )
            for row in self.rows:
                writer.writerow(
                    [
                        repr(row.magnitude),
                        repr(row.steady_error_outer),
                        repr(row.steady_error_inner),
                        int(row.breakdown_outer),
                        int(row.breakdown_inner),
                    ]
                )

    def as_dict(self) -> Dict[str, object]:
        return {
            "outer": self.outer.as_dict(),
            "inner": self.inner.as_dict(),
            "violations": self.invariant_violations(),
        }


def _report_violations(report: RobustnessReport, window: int) -> List[str]:
    violations: List[str] = []
    entries = report.stable_entries()
    steady = [entry.steady_error for entry in entries]
    label = f"{report.loop}/{report.distribution}"
    if report.distribution == "random":
        if len(entries) >= 3 and len(set(steady)) > 1:
            rho, _ = spearmanr([entry.magnitude for entry in entries], steady)
            if not rho > 0.8:
                violations.append(f"{label}: Spearman correlation {rho:.3f} <= 0.8")
    else:
        for before, after in zip(entries, entries[1:]):
            if after.steady_error < before.steady_error - 1e-14:
                violations.append(
                    f"{label}: steady error decreases from magnitude {before.magnitude:g} to {after.magnitude:g}"
                )
        slope = report.loglog_slope()
        if slope is not None and not 1.5 <= slope <= 2.5:
            violations.append(f"{label}: log-log slope {slope:.3f} outside [1.5, 2.5]")
    for entry in entries:
        if entry.magnitude <= 0 or len(entry.errors) <= window:
            continue
        if max(entry.errors[window:]) > ISS_GAIN * max(entry.steady_error, 1e-12):
            violations.append(f"{label}: unbounded error sequence at magnitude {entry.magnitude:g}")
    return violations


def iss_sweep(
    sys: SystemModel,
    cost: CostSpec,
    cfg: DualLoopConfig,
    grid: Sequence[float],
    robust: Optional[RobustConfig] = None,
    init: Optional[InitProvider] = None,
    show_progress: bool = False,
) -> IssSummary:
    robust = robust or RobustConfig()
    magnitudes = [float(value) for value in grid]
    if magnitudes != sorted(magnitudes):
        raise ValueError("magnitude grid must be sorted ascending")
    init = init or LmiInitializer(epsilon=cfg.epsilon_lmi)
    reference = exact_reference(sys, cost, cfg, robust, init)
    outer_distribution = "fixed" if robust.distribution == "worst" else robust.distribution
    outer_report = RobustnessReport(loop="outer", mode=robust.mode, distribution=outer_distribution)
    inner_report = RobustnessReport(loop="inner", mode="per-inner", distribution=robust.distribution)
    summary = IssSummary(outer=outer_report, inner=inner_report)

    for magnitude in tqdm(magnitudes, desc="ISS sweep", disable=not show_progress):
        outer_sched = DisturbanceSchedule(magnitude, robust.mode, outer_distribution, robust.seed)
        inner_sched = DisturbanceSchedule(magnitude, "per-inner", robust.distribution, robust.seed)
        outer_entry = run_inexact_outer(
            sys, cost, cfg, outer_sched, robust, init, reference
        ).entries[0]
        inner_entry = run_inexact_inner(
            sys, cost, cfg, inner_sched, robust.k_fixed, robust, init, reference
        ).entries[0]
        outer_report.entries.append(outer_entry)
        inner_report.entries.append(inner_entry)
        summary.rows.append(
            IssRow(
                magnitude=magnitude,
                steady_error_outer=outer_entry.steady_error,
                steady_error_inner=inner_entry.steady_error,
                breakdown_outer=outer_entry.breakdown,
                breakdown_inner=inner_entry.breakdown,
            )
        )
        LOGGER.info(
            "magnitude %.3e: steady outer %.3e inner %.3e",
            magnitude,
            outer_entry.steady_error,
            inner_entry.steady_error,
        )
    return summary
