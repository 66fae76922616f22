from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from robust_mfsc.config import DualLoopConfig, ExperimentConfig, IrlConfig, SimConfig, population_example_config
from robust_mfsc.model import CostSpec, SystemModel


def scalar_system(a: float, b: float = 1.0, g: float = 1.0, c: float = 0.0, d: float = 0.0) -> SystemModel:
    return SystemModel(A=[[a]], B=[[b]], G=[[g]], C=[[c]], D=[[d]])


def scalar_cost(q: float = 1.0, r: float = 1.0, gamma: float = 2.0, Gamma: float = 0.0) -> CostSpec:
    return CostSpec(Q=[[q]], R=[[r]], Gamma=[[Gamma]], gamma=gamma)


def random_system(seed: int, n: int) -> tuple[SystemModel, CostSpec]:
    """Single-input random system with weak disturbance and noise channels."""
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, 1))
    system = SystemModel(
        A=0.6 * rng.standard_normal((n, n)) - 0.5 * np.eye(n),
        B=B * rng.uniform(0.8, 1.5) / np.linalg.norm(B),
        G=0.3 * rng.standard_normal((n, 1)),
        C=0.05 * rng.standard_normal((n, n)),
        D=0.05 * rng.standard_normal((n, 1)),
    )
    cost = CostSpec(
        Q=np.eye(n) * rng.uniform(0.5, 2.0),
        R=np.array([[rng.uniform(0.5, 2.0)]]),
        Gamma=0.5 * np.eye(n),
        gamma=3.0,
    )
    return system, cost


@pytest.fixture
def worked_scalar() -> tuple[SystemModel, CostSpec]:
    return scalar_system(-1.0), scalar_cost()


@pytest.fixture
def population_config() -> ExperimentConfig:
    return population_example_config()


@pytest.fixture
def population_system(population_config: ExperimentConfig) -> SystemModel:
    return population_config.model


@pytest.fixture
def population_cost(population_config: ExperimentConfig) -> CostSpec:
    return population_config.cost


@pytest.fixture
def dualloop() -> DualLoopConfig:
    return DualLoopConfig()


@pytest.fixture
def small_learning_config(tmp_path) -> ExperimentConfig:
    """Noise-free single-path version of the population example on a fine grid."""
    config = population_example_config()
    config.model = config.model.deterministic()
    config.sim = SimConfig(N=20, dt=1e-4, horizon=3.0, Ns=1, seed=11)
    config.irl = replace(IrlConfig(), tl=3.0, T=0.1, Ts=0.01)
    config.output_dir = tmp_path / "run"
    return config
