"""
robust-mfsc computes decentralized strategies for large populations of
stochastic agents that cooperate against a worst-case disturbance, either
from a known model through dual-loop policy iteration or from measured
trajectories through least-squares learning.
"""

from .config import ExperimentConfig, load_config, population_example_config
from .model import CostSpec, StrategyGains, SystemModel
from .pipeline import LearningPipeline, run_pipeline
from .riccati import RiccatiProblem, dual_loop, outer_loop_are, outer_loop_pi, outer_loop_sare

__all__ = [
    "ExperimentConfig",
    "load_config",
    "population_example_config",
    "CostSpec",
    "StrategyGains",
    "SystemModel",
    "LearningPipeline",
    "run_pipeline",
    "RiccatiProblem",
    "dual_loop",
    "outer_loop_are",
    "outer_loop_pi",
    "outer_loop_sare",
]
