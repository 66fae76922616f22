"""
Monte Carlo simulation of the agent population.

Each sample path integrates ``dx = (Ax + Bu + Gv)dt + (Cx + Du)dw`` with the
Euler-Maruyama scheme and one scalar Wiener process per agent. Every path owns
a random stream derived from ``(seed, stream, path index)``, so results do not
depend on how paths are batched.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Tuple

import numpy as np
from scipy import integrate
from tqdm import tqdm

from .config import IrlConfig, SimConfig
from .errors import SimulationError
from .model import CostSpec, StrategyGains, SystemModel, as_matrix

LOGGER = logging.getLogger(__name__)

BLOWUP_NORM = 1e8
EXPLORATION_STREAM = 99
# Brownian increments are drawn in blocks of this many Euler steps per path
BROWNIAN_BLOCK = 10_000


class Policy(Protocol):
    def inputs(self, step: int, t: float, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ...

    @property
    def max_frequency(self) -> float:
        ...


@dataclass(slots=True)
class ExplorationSignal:
    """Probing signal ``amplitude * sum_j sin(omega_j t)`` per input channel."""

    gain: np.ndarray
    amplitude: float
    frequencies: np.ndarray

    def __post_init__(self) -> None:
        self.gain = as_matrix(self.gain, "gain")
        self.frequencies = np.atleast_2d(np.asarray(self.frequencies, dtype=float))
        if self.frequencies.shape[0] != self.gain.shape[0]:
            raise ValueError("one frequency row is needed per input channel")
        if not np.all(np.isfinite(self.frequencies)):
            raise ValueError("exploration frequencies must be finite")

    @property
    def count(self) -> int:
        return int(self.frequencies.shape[1])

    def value(self, t: float) -> np.ndarray:
        return self.amplitude * np.sin(self.frequencies * t).sum(axis=1)


def exploration_signal(
    gain: np.ndarray,
    amplitude: float,
    count: int,
    band: Tuple[float, float],
    rng: np.random.Generator,
) -> ExplorationSignal:
    """Probing signal with ``count`` frequencies per channel drawn uniformly from ``band``."""
    gain = as_matrix(gain, "gain")
    return ExplorationSignal(
        gain=gain,
        amplitude=amplitude,
        frequencies=sample_frequencies(rng, gain.shape[0], count, band),
    )


def sample_frequencies(
    rng: np.random.Generator, channels: int, count: int, band: Tuple[float, float]
) -> np.ndarray:
    low, high = band
    return rng.uniform(low, high, size=(channels, count))


@dataclass(slots=True)
class ExplorationPolicy:
    """``u = -K_exp x + xi1(t)``, ``v = L_exp x + xi2(t)``."""

    K: np.ndarray
    L: np.ndarray
    control_signal: Optional[ExplorationSignal] = None
    disturbance_signal: Optional[ExplorationSignal] = None

    def inputs(self, step: int, t: float, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        u = -x @ self.K.T
        v = x @ self.L.T
        if self.control_signal is not None:
            u = u + self.control_signal.value(t)
        if self.disturbance_signal is not None:
            v = v + self.disturbance_signal.value(t)
        return u, v

    @property
    def max_frequency(self) -> float:
        signals = [s for s in (self.control_signal, self.disturbance_signal) if s is not None]
        return max((float(np.abs(s.frequencies).max()) for s in signals), default=0.0)


@dataclass(slots=True)
class LinearFeedbackPolicy:
    K: np.ndarray
    L: np.ndarray

    def inputs(self, step: int, t: float, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return -x @ self.K.T, x @ self.L.T

    @property
    def max_frequency(self) -> float:
        return 0.0


@dataclass(slots=True)
class MeanFieldTrackingPolicy:
    """Decentralized strategies fed with a precomputed mean field trajectory."""

    gains: StrategyGains
    mean_field: np.ndarray

    def inputs(self, step: int, t: float, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return decentralized_strategy_eval(self.gains, x, self.mean_field[step])

    @property
    def max_frequency(self) -> float:
        return 0.0


def build_exploration_policy(irl: IrlConfig, seed: int) -> ExplorationPolicy:
    K_exp = as_matrix(irl.K_exp, "K_exp")
    L_exp = as_matrix(irl.L_exp, "L_exp")
    if not irl.exploration:
        return ExplorationPolicy(K=K_exp, L=L_exp)
    rng = np.random.default_rng(np.random.SeedSequence([seed, EXPLORATION_STREAM]))
    return ExplorationPolicy(
        K=K_exp,
        L=L_exp,
        control_signal=exploration_signal(K_exp, irl.sigma1, irl.n1, irl.omega1, rng),
        disturbance_signal=exploration_signal(L_exp, irl.sigma2, irl.n2, irl.omega2, rng),
    )


@dataclass(slots=True)
class TrajectoryBatch:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    disturbances: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return int(self.states.shape[0])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    def mean_state(self) -> np.ndarray:
        return self.states.mean(axis=0)

    def mean_control(self) -> np.ndarray:
        return self.controls.mean(axis=0)

    def mean_disturbance(self) -> np.ndarray:
        return self.disturbances.mean(axis=0)

    def second_moment(self) -> np.ndarray:
        """Sample mean of ``|x|^2`` at every grid point."""
        return np.mean(np.sum(self.states**2, axis=2), axis=0)

    def write_csv(self, destination: Path, max_samples: Optional[int] = None) -> None:
        destination.parent.mkdir(parents=True, exist_ok=True)
        n, m1, m2 = self.states.shape[2], self.controls.shape[2], self.disturbances.shape[2]
        header = (
            ["t", "sample"]
            + [f"x{i + 1}" for i in range(n)]
            + [f"u{i + 1}" for i in range(m1)]
            + [f"v{i + 1}" for i in range(m2)]
        )
        samples = self.n_samples if max_samples is None else min(max_samples, self.n_samples)
        with destination.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            for sample in range(samples):
                for index, t in enumerate(self.times):
                    writer.writerow(
                        [repr(float(t)), sample]
                        + [repr(float(value)) for value in self.states[sample, index]]
                        + [repr(float(value)) for value in self.controls[sample, index]]
                        + [repr(float(value)) for value in self.disturbances[sample, index]]
                    )


def _initial_states(
    cfg: SimConfig, n: int, rngs: list, x0: Optional[np.ndarray]
) -> np.ndarray:
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        return np.broadcast_to(x0, (len(rngs), n)).copy()
    if cfg.x0_low.size != n:
        raise ValueError(f"initial-state box has dimension {cfg.x0_low.size}, expected {n}")
    return np.stack([rng.uniform(cfg.x0_low, cfg.x0_high) for rng in rngs])


def _brownian_block(rngs: list, length: int, substeps: int, h: float) -> np.ndarray:
    """Increments for ``length`` sampling intervals, shape ``(paths, length, substeps)``."""
    draws = np.stack([rng.standard_normal(length * substeps) for rng in rngs])
    return draws.reshape(len(rngs), length, substeps) * np.sqrt(h)


def simulate_agents(
    sys: SystemModel,
    policy: Policy,
    cfg: SimConfig,
    n_paths: Optional[int] = None,
    x0: Optional[np.ndarray] = None,
    noise: bool = True,
    stream: int = 0,
    show_progress: bool = False,
) -> TrajectoryBatch:
    """Euler-Maruyama on ``cfg.substeps`` internal steps per sampling interval ``cfg.dt``.

    States and inputs are stored on the sampling grid only; a tracked mean field
    is held constant between grid points.
    """
    paths = n_paths or cfg.Ns
    steps = cfg.steps
    substeps = cfg.substeps
    h = cfg.substep_dt
    omega_max = policy.max_frequency
    if omega_max > 0 and h > np.pi / (10.0 * omega_max):
        LOGGER.warning(
            "Euler step %.3e does not resolve exploration frequency %.1f rad/s", h, omega_max
        )

    seeds = np.random.SeedSequence([cfg.seed, stream]).spawn(paths)
    rngs = [np.random.default_rng(seed) for seed in seeds]
    x = _initial_states(cfg, sys.n, rngs, x0)
    block = max(1, BROWNIAN_BLOCK // substeps)
    increments = np.zeros((paths, block, substeps))

    times = np.linspace(0.0, steps * cfg.dt, steps + 1)
    states = np.empty((paths, steps + 1, sys.n))
    controls = np.empty((paths, steps + 1, sys.m1))
    disturbances = np.empty((paths, steps + 1, sys.m2))
    A_T, B_T, G_T, C_T, D_T = sys.A.T, sys.B.T, sys.G.T, sys.C.T, sys.D.T

    def inputs(index: int, t: float, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        u, v = policy.inputs(index, t, x)
        return np.broadcast_to(u, (paths, sys.m1)), np.broadcast_to(v, (paths, sys.m2))

    for index in tqdm(range(steps + 1), desc="simulate", disable=not show_progress):
        u, v = inputs(index, times[index], x)
        states[:, index] = x
        controls[:, index] = u
        disturbances[:, index] = v
        if index == steps:
            break
        offset = index % block
        if noise and offset == 0:
            increments = _brownian_block(rngs, min(block, steps - index), substeps, h)
        for sub in range(substeps):
            if sub:
                u, v = inputs(index, times[index] + sub * h, x)
            drift = x @ A_T + u @ B_T + v @ G_T
            diffusion = x @ C_T + u @ D_T
            x = x + drift * h + diffusion * increments[:, offset, sub, None]
        if not np.all(np.isfinite(x)) or np.linalg.norm(x, axis=1).max() > BLOWUP_NORM:
            raise SimulationError(
                f"trajectory blew up at step {index + 1} (t={times[index + 1]:.4f})",
                step_index=index + 1,
            )

    return TrajectoryBatch(
        times=times,
        states=states,
        controls=controls,
        disturbances=disturbances,
        metadata={
            "seed": cfg.seed,
            "stream": stream,
            "paths": paths,
            "noise": noise,
            "substeps": substeps,
        },
    )



def expected_trajectory(
    sys: SystemModel,
    policy: Policy,
    cfg: SimConfig,
    x0_mean: Optional[np.ndarray] = None,
) -> TrajectoryBatch:
    """Noise-free Euler integration of the expected dynamics from the mean initial state."""
    start = cfg.x0_mean if x0_mean is None else np.asarray(x0_mean, dtype=float)
    return simulate_agents(sys, policy, cfg, n_paths=1, x0=start, noise=False)


def estimate_mean_field(batch: TrajectoryBatch) -> np.ndarray:
    if batch.n_samples < 1:
        raise ValueError("empty trajectory batch")
    return batch.mean_state()


def decentralized_strategy_eval(
    gains: StrategyGains, x: np.ndarray, x_bar: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """``u = -K_p x - K_pi x_bar``, ``v = L_p x + L_pi x_bar``."""
    x = np.asarray(x, dtype=float)
    x_bar = np.asarray(x_bar, dtype=float)
    u = -x @ gains.K_p.T - x_bar @ gains.K_pi.T
    v = x @ gains.L_p.T + x_bar @ gains.L_pi.T
    return u, v


def mean_field_trajectory(A_mf: np.ndarray, x0: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Euler integration of ``d x_bar / dt = A_mf x_bar`` on the given grid."""
    trajectory = np.empty((times.size, A_mf.shape[0]))
    trajectory[0] = np.asarray(x0, dtype=float)
    for index in range(times.size - 1):
        step = times[index + 1] - times[index]
        trajectory[index + 1] = trajectory[index] + step * (A_mf @ trajectory[index])
    return trajectory


def population_consistency(batch: TrajectoryBatch, mean_field: np.ndarray) -> float:
    """RMS over time of the gap between the population average and ``x_bar``."""
    gap = batch.mean_state() - mean_field
    return float(np.sqrt(np.mean(np.sum(gap**2, axis=1))))


def estimate_social_cost(batch: TrajectoryBatch, cost: CostSpec) -> float:
    """Per-agent average of ``int |x - Gamma x_(N)|_Q^2 + |u|_R^2 - gamma^2 |v|^2 dt``."""
    population_mean = batch.mean_state()
    deviation = batch.states - population_mean[None, :, :] @ cost.Gamma.T
    running = (
        np.einsum("ptn,nm,ptm->pt", deviation, cost.Q, deviation)
        + np.einsum("pti,ij,ptj->pt", batch.controls, cost.R, batch.controls)
        - cost.gamma**2 * np.sum(batch.disturbances**2, axis=2)
    )
    per_agent = integrate.trapezoid(running, batch.times, axis=1)
    return float(np.mean(per_agent))


def simulate_population(
    sys: SystemModel,
    gains: StrategyGains,
    mean_field: np.ndarray,
    cfg: SimConfig,
    n_agents: Optional[int] = None,
    stream: int = 1,
    show_progress: bool = False,
) -> TrajectoryBatch:
    """Closed-loop population driven by the decentralized strategies."""
    policy = MeanFieldTrackingPolicy(gains=gains, mean_field=mean_field)
    return simulate_agents(
        sys,
        policy,
        cfg,
        n_paths=n_agents or cfg.N,
        stream=stream,
        show_progress=show_progress,
    )
