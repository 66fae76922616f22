"""
High level orchestration of the data-driven learning run.
"""
from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional

import numpy as np

from .config import ExperimentConfig
from .errors import PipelineError, RankConditionError
from .features import DataWindow, RankReport, integral_features, rank_conditions
from .irl import LearnedSolution, identify_system_rows, learn_pi, learn_sare, relative_error, relative_error_table
from .model import StrategyGains, SystemModel
from .riccati import IterationTrace, outer_loop_pi, outer_loop_sare
from .simulation import (
    LinearFeedbackPolicy,
    build_exploration_policy,
    estimate_mean_field,
    simulate_agents,
)
from .stabilizer import make_initializer

LOGGER = logging.getLogger(__name__)

PHASES = ("simulate", "rank", "identify", "learn-sare", "learn-pi", "mean-field")
EXPLORATION_STREAM = 0
MEAN_FIELD_STREAM = 2


@contextmanager
def phase(name: str) -> Iterator[None]:
    """Tag every failure raised inside the block with the phase name."""
    LOGGER.info("Phase %s started", name)
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc
    LOGGER.info("Phase %s finished", name)


@dataclass(slots=True)
class PipelineArtifact:
    rank_report: RankReport
    identified: SystemModel
    sare: LearnedSolution
    pi: LearnedSolution
    gains: StrategyGains
    times: np.ndarray
    mean_field: np.ndarray
    identification_errors: Dict[str, float] = field(default_factory=dict)
    error_table: List[Dict[str, float]] = field(default_factory=list)
    model_traces: Dict[str, IterationTrace] = field(default_factory=dict)

    def summary(self) -> Dict[str, Any]:
        return {
            "rank": self.rank_report.as_dict(),
            "identified": self.identified.as_dict(),
            "identification_errors": dict(self.identification_errors),
            "learned_sare": self.sare.as_dict(),
            "learned_pi": self.pi.as_dict(),
            "gains": self.gains.as_dict(),
            "error_table": list(self.error_table),
        }


@dataclass(slots=True)
class LearningPipeline:
    """Simulate with exploration, check excitation, identify, learn both phases, estimate the mean field.

    ``system`` drives the simulator only; the learning phases never read it.
    With ``compare`` set, the model-based iterates are computed from it as
    well and the learned ones are scored against them.
    """

    config: ExperimentConfig
    system: Optional[SystemModel] = None
    noise: bool = True
    compare: bool = True
    show_progress: bool = False

    def __post_init__(self) -> None:
        if self.system is None:
            self.system = self.config.model

    def run(self) -> PipelineArtifact:
        cfg = self.config
        system = self.system
        assert system is not None
        sim = cfg.sim
        initializer = make_initializer(cfg.init.mode, cfg.init_epsilon, cfg.init.K0)

        with phase("simulate"):
            window = DataWindow.from_config(cfg.irl)
            policy = build_exploration_policy(cfg.irl, sim.seed)
            batch = simulate_agents(
                system,
                policy,
                sim,
                n_paths=sim.Ns,
                noise=self.noise,
                stream=EXPLORATION_STREAM,
                show_progress=self.show_progress,
            )

        with phase("rank"):
            features = integral_features(batch, window, "sample-mean", cfg.irl.quadrature)
            expected = integral_features(batch, window, "expected", cfg.irl.quadrature)
            del batch
            report = rank_conditions(features, expected)
            LOGGER.info(
                "Excitation ranks: stochastic %d/%d, mean trajectory %d/%d",
                report.stochastic_rank,
                report.stochastic_required,
                report.deterministic_rank,
                report.deterministic_required,
            )
            if not report.passed:
                failed = "stochastic" if not report.stochastic_ok else "deterministic"
                raise RankConditionError(
                    "; ".join(report.failures()), condition=failed, ranks=report.as_dict()
                )

        with phase("identify"):
            identified = identify_system_rows(expected)
            identification_errors = {
                name: float(
                    np.linalg.norm(getattr(identified, name) - getattr(system, name))
                    / max(np.linalg.norm(getattr(system, name)), 1e-300)
                )
                for name in ("A", "B", "G")
            }
            LOGGER.info(
                "Identification relative errors: A %.2e, B %.2e, G %.2e",
                identification_errors["A"],
                identification_errors["B"],
                identification_errors["G"],
            )

        with phase("learn-sare"):
            # the diffusion only seeds the initial gain; the regressions never read it
            seeded = identified.with_diffusion(system.C, system.D) if self.noise else identified
            sare = learn_sare(features, cfg.cost, seeded, cfg.dualloop, initializer)

        with phase("learn-pi"):
            pi = learn_pi(expected, cfg.cost, identified, sare, cfg.dualloop, initializer)

        with phase("mean-field"):
            gains = StrategyGains(
                K_p=sare.K,
                K_pi=pi.K,
                L_p=sare.L,
                L_pi=pi.L,
                metadata={"outer_sare": sare.iterations, "outer_pi": pi.iterations},
            )
            feedback = gains.mean_field_feedback
            mean_batch = simulate_agents(
                system,
                LinearFeedbackPolicy(K=feedback.K, L=feedback.L),
                sim,
                n_paths=sim.Ns,
                noise=self.noise,
                stream=MEAN_FIELD_STREAM,
                show_progress=self.show_progress,
            )
            mean_field = estimate_mean_field(mean_batch)
            times = mean_batch.times

        artifact = PipelineArtifact(
            rank_report=report,
            identified=identified,
            sare=sare,
            pi=pi,
            gains=gains,
            times=times,
            mean_field=mean_field,
            identification_errors=identification_errors,
        )
        if self.compare:
            self._compare(artifact, initializer)
        return artifact

    def _compare(self, artifact: PipelineArtifact, initializer) -> None:
        cfg = self.config
        system = self.system.deterministic() if not self.noise else self.system
        with phase("learn-sare"):
            model_sare, sare_trace = outer_loop_sare(system, cfg.cost, cfg.dualloop, initializer)
        with phase("learn-pi"):
            _, pi_trace = outer_loop_pi(system, cfg.cost, model_sare.P, cfg.dualloop, initializer)
        artifact.model_traces = {"sare": sare_trace, "pi": pi_trace}
        artifact.error_table = relative_error_table(
            sare_trace, artifact.sare, system.D, pi_trace, artifact.pi
        )
        LOGGER.info(
            "Final learned P relative error %.3e (%d learned vs %d model-based outer iterations)",
            relative_error(artifact.sare.P, model_sare.P),
            artifact.sare.iterations,
            sare_trace.outer_count,
        )


def run_pipeline(
    config: ExperimentConfig,
    system: Optional[SystemModel] = None,
    noise: bool = True,
    compare: bool = True,
    show_progress: bool = False,
) -> PipelineArtifact:
    return LearningPipeline(
        config=config,
        system=system,
        noise=noise,
        compare=compare,
        show_progress=show_progress,
    ).run()
