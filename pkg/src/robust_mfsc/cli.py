"""
Command line interface for robust mean field social control experiments.
"""
from __future__ import annotations

import argparse
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np

from .config import (
    DISTRIBUTIONS,
    DISTURBANCE_MODES,
    ExperimentConfig,
    load_config,
    population_example_config,
)
from .errors import (
    EXIT_CHECKS,
    EXIT_OK,
    EXIT_ROBUSTNESS,
    ConfigError,
    PipelineError,
    RankConditionError,
    SimulationError,
    SolverError,
    exit_code_for,
)
from .irl import TABLE_COLUMNS
from .model import StrategyGains, closed_loop_mean_field_matrix, spectral_abscissa_of
from .pipeline import MEAN_FIELD_STREAM, PipelineArtifact, run_pipeline
from .reporting import (
    ReproductionSummary,
    generate_summary,
    write_diagnostic,
    write_json,
    write_manifest,
    write_matrix_csv,
    write_rows_csv,
    write_series_csv,
    write_summary,
)
from .riccati import (
    IterationTrace,
    RiccatiSolution,
    check_are_detectability,
    outer_loop_are,
    outer_loop_pi,
    outer_loop_sare,
    riccati_residual,
    trace_summary,
)
from .robustness import iss_sweep
from .simulation import (
    LinearFeedbackPolicy,
    estimate_mean_field,
    estimate_social_cost,
    mean_field_trajectory,
    population_consistency,
    simulate_agents,
    simulate_population,
)
from .stabilizer import make_initializer
from .validation import validate_model

LOGGER = logging.getLogger("robust_mfsc.cli")

SOLVE_ITERATION_LIMIT = 5
RESIDUAL_LIMIT = 1e-8
LEARNED_ERROR_LIMIT = 0.05
IDENTIFICATION_LIMIT = 1e-2


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        "-c",
        type=Path,
        help="INI experiment configuration (defaults to the built-in population example).",
    )
    parser.add_argument("--out", "-o", type=Path, help="Output directory for run artifacts.")
    parser.add_argument("--seed", type=int, help="Override the simulation and disturbance seeds.")
    parser.add_argument(
        "--log-level",
        default=None,
        help="Python logging level (DEBUG, INFO, WARNING, ERROR).",
    )
    parser.add_argument("--progress", action="store_true", help="Show progress bars for long loops.")


def parse_args(argv: Iterable[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="robust-mfsc: dual-loop solvers and data-driven learning for robust mean field social control."
    )
    commands = parser.add_subparsers(dest="command", required=True)

    solve = commands.add_parser("solve", help="Model-based dual-loop solve of the stochastic and mean field equations.")
    _add_common(solve)

    learn = commands.add_parser("learn", help="Data-driven learning from simulated exploration data.")
    _add_common(learn)

    robust = commands.add_parser("robust", help="Small-disturbance ISS sweep of the inexact iterations.")
    _add_common(robust)
    robust.add_argument("--grid", help='Comma separated disturbance magnitudes, e.g. "1e-4,1e-3,1e-2".')
    robust.add_argument("--mode", choices=DISTURBANCE_MODES, help="Where disturbances are injected.")
    robust.add_argument("--distribution", choices=DISTRIBUTIONS, help="Disturbance direction.")

    reproduce = commands.add_parser("reproduce", help="Solve, learn and simulate the closed-loop population.")
    _add_common(reproduce)
    reproduce.add_argument("--skip-learn", action="store_true", help="Use the model-based gains only.")
    return parser.parse_args(argv)


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s - %(message)s",
    )


def _parse_grid(text: str) -> List[float]:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --grid value {text!r}") from exc


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config) if args.config else population_example_config()
    if args.out is not None:
        config.output_dir = args.out
    if args.seed is not None:
        config.sim = replace(config.sim, seed=args.seed)
        config.robust = replace(config.robust, seed=args.seed)
    if getattr(args, "grid", None):
        config.robust = replace(config.robust, grid=_parse_grid(args.grid))
    if getattr(args, "mode", None):
        config.robust = replace(config.robust, mode=args.mode)
    if getattr(args, "distribution", None):
        config.robust = replace(config.robust, distribution=args.distribution)
    problems = validate_model(config.model, config.cost)
    if problems:
        raise ConfigError("; ".join(problems))
    return config


@dataclass(slots=True)
class ModelBasedRun:
    sare: RiccatiSolution
    are: RiccatiSolution
    pi: RiccatiSolution
    traces: Dict[str, IterationTrace]
    residuals: Dict[str, float]
    A_mf: np.ndarray

    @property
    def gains(self) -> StrategyGains:
        return StrategyGains(K_p=self.sare.K, K_pi=self.pi.K, L_p=self.sare.L, L_pi=self.pi.L)


def solve_model(config: ExperimentConfig) -> ModelBasedRun:
    init = make_initializer(config.init.mode, config.init_epsilon, config.init.K0)
    if not check_are_detectability(config.model, config.cost):
        LOGGER.warning("(A, Q^1/2 (I - Gamma)) is not detectable; the mean field loop may not converge.")
    LOGGER.info("Solving the stochastic equation")
    sare, sare_trace = outer_loop_sare(config.model, config.cost, config.dualloop, init, precheck=True)
    LOGGER.info("Solving the mean field equation")
    are, are_trace = outer_loop_are(config.model, config.cost, sare.P, config.dualloop, init)
    pi, pi_trace = outer_loop_pi(config.model, config.cost, sare.P, config.dualloop, init)
    residuals = {
        "sare": riccati_residual(sare.P, config.model, config.cost, "sare"),
        "are": riccati_residual(are.P, config.model, config.cost, "are", P_star=sare.P),
        "pi_consistency": float(np.linalg.norm(pi.P - (are.P - sare.P), 2)),
    }
    A_mf = closed_loop_mean_field_matrix(config.model, config.cost, sare.P, are.P)
    return ModelBasedRun(
        sare=sare,
        are=are,
        pi=pi,
        traces={"sare": sare_trace, "are": are_trace, "pi": pi_trace},
        residuals=residuals,
        A_mf=A_mf,
    )


def write_model_artifacts(run: ModelBasedRun, out_dir: Path) -> Dict[str, Any]:
    write_matrix_csv(run.sare.P, out_dir / "P_star.csv")
    write_matrix_csv(run.are.P, out_dir / "S_star.csv")
    write_matrix_csv(run.pi.P, out_dir / "Pi_star.csv")
    write_matrix_csv(run.A_mf, out_dir / "A_mean_field.csv")
    for name, trace in run.traces.items():
        trace.write_csv(out_dir / f"trace_{name}.csv")
    payload = {
        "gains": run.gains.as_dict(),
        "sare": run.sare.as_dict(),
        "are": run.are.as_dict(),
        "pi": run.pi.as_dict(),
        "residuals": run.residuals,
        "contraction": trace_summary(run.traces.values()),
        "mean_field_abscissa": spectral_abscissa_of(run.A_mf),
    }
    write_json(payload, out_dir / "solve.json")
    return payload


def write_learning_artifacts(artifact: PipelineArtifact, out_dir: Path) -> None:
    write_json(artifact.summary(), out_dir / "learn.json")
    write_json(artifact.rank_report.as_dict(), out_dir / "rank.json")
    write_rows_csv(artifact.error_table, out_dir / "error_table.csv", ("k",) + TABLE_COLUMNS)
    write_series_csv(artifact.times, {"xbar": artifact.mean_field}, out_dir / "mean_field.csv")
    artifact.sare.trace.write_csv(out_dir / "trace_learn_sare.csv")
    artifact.pi.trace.write_csv(out_dir / "trace_learn_pi.csv")


def cmd_solve(config: ExperimentConfig, args: argparse.Namespace) -> int:
    run = solve_model(config)
    write_model_artifacts(run, config.output_dir)
    LOGGER.info(
        "Solved: %d outer iterations (stochastic), %d (mean field); residuals %.2e / %.2e",
        run.sare.iterations,
        run.are.iterations,
        run.residuals["sare"],
        run.residuals["are"],
    )
    return EXIT_OK


def cmd_learn(config: ExperimentConfig, args: argparse.Namespace) -> int:
    artifact = run_pipeline(config, show_progress=args.progress)
    write_learning_artifacts(artifact, config.output_dir)
    LOGGER.info(
        "Learned gains after %d / %d outer iterations",
        artifact.sare.iterations,
        artifact.pi.iterations,
    )
    return EXIT_OK


def cmd_robust(config: ExperimentConfig, args: argparse.Namespace) -> int:
    init = make_initializer(config.init.mode, config.init_epsilon, config.init.K0)
    summary = iss_sweep(
        config.model,
        config.cost,
        config.dualloop,
        config.robust.grid,
        config.robust,
        init,
        show_progress=args.progress,
    )
    summary.write_csv(config.output_dir / "iss_summary.csv")
    write_json(summary.as_dict(), config.output_dir / "iss_report.json")
    violations = summary.invariant_violations(config.robust.steady_window)
    for violation in violations:
        LOGGER.error("Robustness invariant violated: %s", violation)
    return EXIT_ROBUSTNESS if violations else EXIT_OK


def _mean_field_estimate(config: ExperimentConfig, gains: StrategyGains, show_progress: bool) -> np.ndarray:
    feedback = gains.mean_field_feedback
    batch = simulate_agents(
        config.model,
        LinearFeedbackPolicy(K=feedback.K, L=feedback.L),
        config.sim,
        n_paths=config.sim.Ns,
        stream=MEAN_FIELD_STREAM,
        show_progress=show_progress,
    )
    return estimate_mean_field(batch)


def cmd_reproduce(config: ExperimentConfig, args: argparse.Namespace) -> int:
    out_dir = config.output_dir
    summary = generate_summary(config, config.sim.seed)

    run = solve_model(config)
    write_model_artifacts(run, out_dir)
    for name in ("sare", "are"):
        solution = getattr(run, name)
        summary.add(
            f"{name}_outer_iterations",
            solution.iterations <= SOLVE_ITERATION_LIMIT,
            solution.iterations,
            SOLVE_ITERATION_LIMIT,
        )
        summary.add(
            f"{name}_residual",
            run.residuals[name] <= RESIDUAL_LIMIT,
            run.residuals[name],
            RESIDUAL_LIMIT,
        )

    gains = run.gains
    if args.skip_learn:
        LOGGER.warning("Skipping the learning phase; the population uses model-based gains.")
        mean_field = _mean_field_estimate(config, gains, args.progress)
    else:
        artifact = run_pipeline(config, show_progress=args.progress)
        write_learning_artifacts(artifact, out_dir)
        _learning_checks(summary, artifact)
        gains = artifact.gains
        mean_field = artifact.mean_field

    population = simulate_population(
        config.model, gains, mean_field, config.sim, show_progress=args.progress
    )
    consistency = population_consistency(population, mean_field)
    predicted = mean_field_trajectory(run.A_mf, mean_field[0], population.times)
    write_series_csv(
        population.times,
        {"avg": population.mean_state(), "xbar": mean_field, "ode": predicted},
        out_dir / "population_average.csv",
    )
    population.write_csv(out_dir / "agents.csv", max_samples=10)
    summary.metrics.update(
        {
            "population_consistency_rms": consistency,
            "mean_field_vs_ode_rms": float(np.sqrt(np.mean(np.sum((mean_field - predicted) ** 2, axis=1)))),
            "social_cost_per_agent": estimate_social_cost(population, config.cost),
            "second_moment_start": float(population.second_moment()[0]),
            "second_moment_end": float(population.second_moment()[-1]),
            "gains": gains.as_dict(),
            "skip_learn": bool(args.skip_learn),
        }
    )
    summary.add("population_finite", bool(np.all(np.isfinite(population.states))))
    write_summary(summary, out_dir / "summary.json")
    LOGGER.info(
        "Reproduction finished: %d/%d checks passed, population RMS gap %.3e",
        sum(check.passed for check in summary.checks),
        len(summary.checks),
        consistency,
    )
    for check in summary.checks:
        if not check.passed:
            LOGGER.error(
                "Acceptance check failed: %s (value %s, threshold %s)",
                check.name,
                check.value,
                check.threshold,
            )
    return EXIT_OK if summary.passed else EXIT_CHECKS


def _learning_checks(summary: ReproductionSummary, artifact: PipelineArtifact) -> None:
    summary.add("rank_conditions", artifact.rank_report.passed)
    for name in ("sare", "pi"):
        solution = getattr(artifact, name)
        summary.add(
            f"learned_{name}_outer_iterations",
            solution.iterations <= SOLVE_ITERATION_LIMIT,
            solution.iterations,
            SOLVE_ITERATION_LIMIT,
        )
    worst_identification = max(artifact.identification_errors.values())
    summary.add(
        "identification_error",
        worst_identification <= IDENTIFICATION_LIMIT,
        worst_identification,
        IDENTIFICATION_LIMIT,
    )
    if artifact.error_table:
        final = artifact.error_table[-1]
        for column in TABLE_COLUMNS:
            value = final[column]
            if np.isfinite(value):
                summary.add(f"learned_error_{column}", value <= LEARNED_ERROR_LIMIT, value, LEARNED_ERROR_LIMIT)


COMMANDS = {
    "solve": cmd_solve,
    "learn": cmd_learn,
    "robust": cmd_robust,
    "reproduce": cmd_reproduce,
}


def main(argv: Iterable[str] | None = None) -> int:
    args = parse_args(argv)
    configure_logging(args.log_level or "INFO")
    out_dir: Optional[Path] = args.out
    try:
        config = resolve_config(args)
        if args.log_level is None and config.log_level.upper() != "INFO":
            logging.getLogger().setLevel(getattr(logging, config.log_level.upper(), logging.INFO))
        out_dir = config.output_dir
        write_manifest(out_dir, config, config.sim.seed, command=args.command)
        return COMMANDS[args.command](config, args)
    except (ValueError, SolverError, RankConditionError, SimulationError, PipelineError) as exc:
        code = exit_code_for(exc)
        LOGGER.error("%s failed (exit %d): %s", args.command, code, exc)
        if out_dir is not None:
            write_diagnostic(out_dir, exc, {"command": args.command})
        return code


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
