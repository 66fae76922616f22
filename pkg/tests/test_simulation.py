import logging

import numpy as np
import pytest

from robust_mfsc.config import IrlConfig, SimConfig, population_example_config
from robust_mfsc.errors import SimulationError
from robust_mfsc.lyapunov import LyapOperatorSpec, is_ms_stable, solve_generalized_lyapunov
from robust_mfsc.model import StrategyGains, SystemModel
from robust_mfsc.riccati import outer_loop_pi, outer_loop_sare
from robust_mfsc.simulation import (
    ExplorationPolicy,
    ExplorationSignal,
    LinearFeedbackPolicy,
    build_exploration_policy,
    decentralized_strategy_eval,
    estimate_social_cost,
    expected_trajectory,
    exploration_signal,
    mean_field_trajectory,
    population_consistency,
    sample_frequencies,
    simulate_agents,
    simulate_population,
)

from conftest import scalar_cost, scalar_system


def scalar_sim(dt: float = 1e-3, horizon: float = 1.0, paths: int = 4, seed: int = 5) -> SimConfig:
    return SimConfig(N=paths, dt=dt, horizon=horizon, Ns=paths, seed=seed, x0_low=[0.5], x0_high=[1.5])


def test_frozen_dynamics_keep_initial_state():
    system = SystemModel(A=np.zeros((2, 2)), B=np.zeros((2, 1)), G=np.zeros((2, 1)), C=np.zeros((2, 2)), D=np.zeros((2, 1)))
    batch = simulate_agents(system, LinearFeedbackPolicy(K=np.zeros((1, 2)), L=np.zeros((1, 2))), SimConfig(dt=0.01, horizon=0.5, Ns=3))
    assert batch.states.shape == (3, 51, 2)
    np.testing.assert_array_equal(batch.states[:, -1], batch.states[:, 0])


def test_noise_free_decay_matches_exponential():
    batch = simulate_agents(scalar_system(-1.0), LinearFeedbackPolicy(K=[[0.0]], L=[[0.0]]), scalar_sim(), x0=[1.0], noise=False)
    assert batch.states[0, -1, 0] == pytest.approx(np.exp(-1.0), rel=1e-3)
    assert batch.dt == pytest.approx(1e-3)


def test_same_seed_same_paths():
    policy = LinearFeedbackPolicy(K=[[0.5]], L=[[0.0]])
    system = scalar_system(-1.0, c=0.3, d=0.1)
    first = simulate_agents(system, policy, scalar_sim())
    second = simulate_agents(system, policy, scalar_sim())
    np.testing.assert_array_equal(first.states, second.states)
    other = simulate_agents(system, policy, scalar_sim(seed=6))
    assert not np.array_equal(first.states, other.states)


def test_paths_do_not_depend_on_batch_size():
    policy = LinearFeedbackPolicy(K=[[0.5]], L=[[0.0]])
    system = scalar_system(-1.0, c=0.3)
    small = simulate_agents(system, policy, scalar_sim(), n_paths=3)
    large = simulate_agents(system, policy, scalar_sim(), n_paths=5)
    np.testing.assert_array_equal(small.states, large.states[:3])


def test_second_moment_of_geometric_motion():
    a, c = -1.0, 0.5
    batch = simulate_agents(
        scalar_system(a, c=c),
        LinearFeedbackPolicy(K=[[0.0]], L=[[0.0]]),
        scalar_sim(paths=4000),
        x0=[1.0],
    )
    assert batch.second_moment()[-1] == pytest.approx(np.exp(2 * a + c**2), rel=0.1)
    assert batch.mean_state()[-1, 0] == pytest.approx(np.exp(a), rel=0.05)


def test_blow_up_raises_with_step_index():
    with pytest.raises(SimulationError) as info:
        simulate_agents(scalar_system(100.0), LinearFeedbackPolicy(K=[[0.0]], L=[[0.0]]), scalar_sim(dt=0.01), noise=False)
    assert 0 < info.value.step_index < 100


def test_coarse_step_warns_about_exploration(caplog):
    signal = ExplorationSignal(gain=[[0.0]], amplitude=1.0, frequencies=[[100.0]])
    policy = ExplorationPolicy(K=[[1.0]], L=[[0.0]], control_signal=signal)
    with caplog.at_level(logging.WARNING, logger="robust_mfsc.simulation"):
        simulate_agents(scalar_system(-1.0), policy, scalar_sim(dt=0.01), noise=False)
    assert "does not resolve exploration frequency" in caplog.text


def test_substeps_refine_integration_on_the_same_grid():
    policy = LinearFeedbackPolicy(K=[[0.0]], L=[[0.0]])
    coarse = simulate_agents(scalar_system(-1.0), policy, scalar_sim(dt=0.01), x0=[1.0], noise=False)
    sim = SimConfig(N=4, dt=0.01, horizon=1.0, Ns=4, seed=5, x0_low=[0.5], x0_high=[1.5], substeps=10)
    fine = simulate_agents(scalar_system(-1.0), policy, sim, x0=[1.0], noise=False)
    assert fine.states.shape == coarse.states.shape
    assert fine.dt == pytest.approx(0.01)
    assert fine.metadata["substeps"] == 10
    exact = np.exp(-1.0)
    assert abs(fine.states[0, -1, 0] - exact) < 0.2 * abs(coarse.states[0, -1, 0] - exact)


def test_substeps_resolve_exploration_without_warning(caplog):
    signal = ExplorationSignal(gain=[[0.0]], amplitude=1.0, frequencies=[[100.0]])
    policy = ExplorationPolicy(K=[[1.0]], L=[[0.0]], control_signal=signal)
    sim = SimConfig(N=1, dt=0.01, horizon=1.0, Ns=1, seed=5, x0_low=[0.5], x0_high=[1.5], substeps=10)
    with caplog.at_level(logging.WARNING, logger="robust_mfsc.simulation"):
        simulate_agents(scalar_system(-1.0), policy, sim, noise=False)
    assert "does not resolve" not in caplog.text


def test_substeps_keep_second_moment_of_geometric_motion():
    a, c = -1.0, 0.5
    sim = SimConfig(N=2000, dt=0.01, horizon=1.0, Ns=2000, seed=5, x0_low=[0.5], x0_high=[1.5], substeps=5)
    batch = simulate_agents(scalar_system(a, c=c), LinearFeedbackPolicy(K=[[0.0]], L=[[0.0]]), sim, x0=[1.0])
    assert batch.second_moment()[-1] == pytest.approx(np.exp(2 * a + c**2), rel=0.1)


def test_exploration_policy_is_seeded(population_config):
    first = build_exploration_policy(population_config.irl, seed=1)
    second = build_exploration_policy(population_config.irl, seed=1)
    np.testing.assert_array_equal(first.control_signal.frequencies, second.control_signal.frequencies)
    assert first.control_signal.count == 100
    assert np.abs(first.disturbance_signal.frequencies).max() <= 300.0
    silent = build_exploration_policy(IrlConfig(exploration=False), seed=1)
    assert silent.control_signal is None and silent.max_frequency == 0.0


def test_decentralized_strategy_eval():
    gains = StrategyGains(K_p=[[1.0, 0.0]], K_pi=[[0.0, 2.0]], L_p=[[0.5, 0.0]], L_pi=[[0.0, -1.0]])
    u, v = decentralized_strategy_eval(gains, np.array([[1.0, 1.0]]), np.array([2.0, 3.0]))
    np.testing.assert_allclose(u, [[-7.0]])
    np.testing.assert_allclose(v, [[-2.5]])


def test_mean_field_trajectory_and_consistency():
    times = np.linspace(0.0, 1.0, 1001)
    trajectory = mean_field_trajectory(np.array([[-1.0]]), np.array([1.0]), times)
    assert trajectory[-1, 0] == pytest.approx(np.exp(-1.0), rel=1e-3)

    gains = StrategyGains(K_p=[[1.0]], K_pi=[[0.0]], L_p=[[0.0]], L_pi=[[0.0]])
    cfg = scalar_sim(paths=2000)
    batch = simulate_population(scalar_system(0.0, c=0.2), gains, np.zeros((cfg.steps + 1, 1)), cfg)
    expected = mean_field_trajectory(np.array([[-1.0]]), cfg.x0_mean, batch.times)
    assert population_consistency(batch, expected) < 0.05


def test_expected_trajectory_starts_at_box_centre():
    batch = expected_trajectory(scalar_system(-1.0), LinearFeedbackPolicy(K=[[0.0]], L=[[0.0]]), scalar_sim())
    assert batch.n_samples == 1
    assert batch.states[0, 0, 0] == pytest.approx(1.0)


def test_social_cost_of_constant_path():
    batch = simulate_agents(
        SystemModel(A=[[0.0]], B=[[0.0]], G=[[0.0]], C=[[0.0]], D=[[0.0]]),
        LinearFeedbackPolicy(K=[[0.0]], L=[[0.0]]),
        scalar_sim(paths=2),
        x0=[1.0],
    )
    assert estimate_social_cost(batch, scalar_cost(q=2.0)) == pytest.approx(2.0)


def test_batch_csv_header(tmp_path):
    batch = simulate_agents(scalar_system(-1.0), LinearFeedbackPolicy(K=[[0.0]], L=[[0.0]]), scalar_sim(horizon=0.01, dt=0.001))
    destination = tmp_path / "agents.csv"
    batch.write_csv(destination, max_samples=2)
    lines = destination.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "t,sample,x1,u1,v1"
    assert len(lines) == 1 + 2 * 11


def test_frequencies_are_seeded_and_in_band():
    first = sample_frequencies(np.random.default_rng(4), 2, 50, (-100.0, 100.0))
    second = sample_frequencies(np.random.default_rng(4), 2, 50, (-100.0, 100.0))
    assert first.shape == (2, 50)
    np.testing.assert_array_equal(first, second)
    assert np.all((first >= -100.0) & (first <= 100.0))


def test_exploration_signal_sums_sinusoids():
    signal = exploration_signal([[6.0, -3.0]], 5.0, 3, (-300.0, 300.0), np.random.default_rng(2))
    assert signal.count == 3
    np.testing.assert_array_equal(signal.value(0.0), [0.0])
    t = 0.37
    np.testing.assert_allclose(signal.value(t), [5.0 * np.sin(signal.frequencies[0] * t).sum()])


@pytest.fixture(scope="module")
def certified_gains():
    config = population_example_config()
    sare, _ = outer_loop_sare(config.model, config.cost)
    pi, _ = outer_loop_pi(config.model, config.cost, sare.P)
    return config, StrategyGains(K_p=sare.K, K_pi=pi.K, L_p=sare.L, L_pi=pi.L)


def test_certified_closed_loop_decreases_second_moment(certified_gains):
    config, gains = certified_gains
    op = LyapOperatorSpec(sys=config.model, K=gains.K_p, L=gains.L_p)
    assert is_ms_stable(op)
    # L(P) = -I makes E[x'Px] a Lyapunov function with derivative -E|x|^2
    P = solve_generalized_lyapunov(op, np.eye(2))
    sim = SimConfig(N=400, dt=1e-3, horizon=4.0, Ns=400, seed=9)
    batch = simulate_agents(config.model, LinearFeedbackPolicy(K=gains.K_p, L=gains.L_p), sim)
    energy = np.einsum("pti,ij,ptj->t", batch.states, P, batch.states) / batch.n_samples
    checkpoints = energy[::1000]
    assert np.all(np.diff(checkpoints) < 0)
    assert batch.second_moment()[-1] < batch.second_moment()[0]


def test_population_gap_to_mean_field_shrinks_with_size(certified_gains):
    config, gains = certified_gains
    feedback = gains.mean_field_feedback
    model = config.model
    A_fb = model.A - model.B @ feedback.K + model.G @ feedback.L

    def average_gap(agents: int) -> float:
        gaps = []
        for seed in (1, 2, 3):
            sim = SimConfig(N=agents, dt=5e-3, horizon=3.0, Ns=agents, seed=seed)
            times = np.linspace(0.0, sim.horizon, sim.steps + 1)
            mean_field = mean_field_trajectory(A_fb, sim.x0_mean, times)
            batch = simulate_population(model, gains, mean_field, sim)
            gaps.append(population_consistency(batch, mean_field))
        return float(np.mean(gaps))

    assert average_gap(500) < average_gap(50)
