import numpy as np
import pytest

from robust_mfsc.config import DualLoopConfig, SimConfig, population_example_config
from robust_mfsc.errors import RankConditionError
from robust_mfsc.features import DataWindow, RegressorSet, integral_features
from robust_mfsc.irl import (
    LearnedSolution,
    LearnedStep,
    ThetaP,
    ThetaPi,
    assemble_regressors_pi,
    assemble_regressors_sare,
    identify_system_rows,
    learned_dual_loop,
    learned_sare_problem,
    lsq_step_are_pi,
    lsq_step_sare,
    relative_error,
    relative_error_table,
)
from robust_mfsc.lyapunov import solve_generalized_lyapunov, vecm
from robust_mfsc.model import derived_cost_quantities
from robust_mfsc.riccati import RiccatiProblem, gain_from_value, outer_loop_sare, shifted_problem
from robust_mfsc.simulation import build_exploration_policy, simulate_agents
from robust_mfsc.stabilizer import LmiInitializer, verify_stabilizer


def explored_features(paths: int = 5, dt: float = 1e-3, horizon: float = 1.0, exploration: bool = True):
    config = population_example_config()
    config.sim = SimConfig(N=paths, dt=dt, horizon=horizon, Ns=paths, seed=3)
    config.irl.exploration = exploration
    policy = build_exploration_policy(config.irl, seed=3)
    batch = simulate_agents(config.model, policy, config.sim)
    window = DataWindow(t1=0.0, count=int(round((horizon - 0.1) / 0.01)), T=0.1, Ts=0.01)
    return (
        config,
        integral_features(batch, window),
        integral_features(batch, window, kind="expected"),
    )


def with_exact_identity(features: RegressorSet, psi: np.ndarray, rhs: np.ndarray, theta: np.ndarray, p_part: np.ndarray) -> RegressorSet:
    """Shift ``delta_x`` along ``vecm(P)`` so that ``theta`` solves the regression exactly."""
    gap = rhs - psi @ theta
    corrected = features.sliced(np.arange(features.rows))
    corrected.delta_x = features.delta_x + np.outer(gap, p_part) / float(p_part @ p_part)
    return corrected


@pytest.fixture(scope="module")
def explored():
    return explored_features()


def test_sare_regression_recovers_policy_evaluation(explored):
    config, features, _ = explored
    system, cost = config.model, config.cost
    problem = RiccatiProblem.sare(system, cost)
    L = np.array([[0.1, -0.2]])
    K = LmiInitializer(epsilon=5.0)(problem, L)
    P = solve_generalized_lyapunov(problem.operator(K, L), problem.stage_weight(K, L))
    expected = ThetaP(
        P=P,
        M=problem.cross_term(P),
        L=gain_from_value(P, problem, "disturbance"),
        Lambda=system.D.T @ P @ system.D,
    )
    psi, rhs = assemble_regressors_sare(features, K, L, cost)
    assert psi.shape == (features.rows, 8)
    exact = with_exact_identity(features, psi, rhs, expected.to_vector(), vecm(P))
    psi, rhs = assemble_regressors_sare(exact, K, L, cost)
    theta, K_next, residual = lsq_step_sare(psi, rhs, exact, cost)
    np.testing.assert_allclose(theta.P, P, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(theta.L, expected.L, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(theta.Lambda, expected.Lambda, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(K_next, gain_from_value(P, problem), rtol=1e-6, atol=1e-6)
    assert residual < 1e-6


def test_duplicate_windows_do_not_change_solution(explored):
    config, features, _ = explored
    K, L = np.array([[6.0, -3.0]]), np.zeros((1, 2))
    psi, rhs = assemble_regressors_sare(features, K, L, config.cost)
    first, _, _ = lsq_step_sare(psi, rhs, features, config.cost)
    doubled = features.sliced(np.concatenate([np.arange(features.rows)] * 2))
    psi, rhs = assemble_regressors_sare(doubled, K, L, config.cost)
    second, _, _ = lsq_step_sare(psi, rhs, doubled, config.cost)
    np.testing.assert_allclose(second.to_vector(), first.to_vector(), rtol=1e-6, atol=1e-8)


def test_zero_gains_leave_plain_cross_integrals(explored):
    config, features, _ = explored
    psi, rhs = assemble_regressors_sare(features, np.zeros((1, 2)), np.zeros((1, 2)), config.cost)
    np.testing.assert_allclose(psi[:, 3:5], -2.0 * features.I_xu)
    np.testing.assert_allclose(psi[:, 5:7], -2.0 * config.cost.gamma**2 * features.I_xv)
    np.testing.assert_allclose(psi[:, 7:], -features.I_u)
    np.testing.assert_allclose(rhs, -features.I_x @ vecm(config.cost.Q))


def test_gain_shape_is_checked(explored):
    config, features, _ = explored
    with pytest.raises(ValueError, match="K has shape"):
        assemble_regressors_sare(features, np.zeros((2, 2)), np.zeros((1, 2)), config.cost)


def test_missing_exploration_is_reported():
    config, features, _ = explored_features(paths=2, horizon=0.5, exploration=False)
    psi, rhs = assemble_regressors_sare(features, np.array([[6.0, -3.0]]), np.zeros((1, 2)), config.cost)
    with pytest.raises(RankConditionError, match="insufficient excitation") as info:
        lsq_step_sare(psi, rhs, features, config.cost)
    assert info.value.condition == "stochastic"


def test_pi_regression_recovers_shifted_evaluation(explored):
    config, _, expected = explored
    system, cost = config.model, config.cost
    sare, _ = outer_loop_sare(system, cost, DualLoopConfig(xi=1e-10))
    derived = derived_cost_quantities(system, cost, sare.P)
    problem = shifted_problem(system, cost, sare.P)
    K_pi, L_pi = np.zeros((1, 2)), np.zeros((1, 2))
    Pi = solve_generalized_lyapunov(problem.operator(K_pi, L_pi), problem.stage_weight(K_pi, L_pi))
    target = ThetaPi(
        Pi=Pi,
        K=gain_from_value(Pi, problem),
        L=gain_from_value(Pi, problem, "disturbance"),
    )
    args = (K_pi, L_pi, sare.K, sare.L, derived.Upsilon, cost.Q_Gamma, cost.gamma)
    psi, rhs = assemble_regressors_pi(expected, *args)
    assert psi.shape == (expected.rows, 7)
    exact = with_exact_identity(expected, psi, rhs, target.to_vector(), vecm(Pi))
    theta, residual = lsq_step_are_pi(exact, *args)
    np.testing.assert_allclose(theta.Pi, Pi, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(theta.K, target.K, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(theta.L, target.L, rtol=1e-6, atol=1e-6)
    assert residual < 1e-6


def test_identify_drift_from_fine_noise_free_data():
    config = population_example_config()
    config.model = config.model.deterministic()
    config.sim = SimConfig(N=1, dt=1e-4, horizon=1.0, Ns=1, seed=3)
    batch = simulate_agents(config.model, build_exploration_policy(config.irl, seed=3), config.sim, noise=False)
    expected = integral_features(batch, DataWindow(t1=0.0, count=90, T=0.1, Ts=0.01), kind="expected", quadrature="left")
    identified = identify_system_rows(expected)
    truth = np.hstack([config.model.A, config.model.B, config.model.G])
    estimate = np.hstack([identified.A, identified.B, identified.G])
    assert np.linalg.norm(estimate - truth) / np.linalg.norm(truth) < 2e-2
    np.testing.assert_array_equal(identified.C, 0.0)
    np.testing.assert_array_equal(identified.D, 0.0)


def test_learned_initial_gain_is_mean_square_admissible():
    config = population_example_config()
    deterministic = config.model.deterministic()
    config.sim = SimConfig(N=1, dt=1e-4, horizon=1.0, Ns=1, seed=3)
    batch = simulate_agents(deterministic, build_exploration_policy(config.irl, seed=3), config.sim, noise=False)
    expected = integral_features(batch, DataWindow(t1=0.0, count=90, T=0.1, Ts=0.01), kind="expected", quadrature="left")
    seeded = identify_system_rows(expected).with_diffusion(config.model.C, config.model.D)

    problem = learned_sare_problem(config.cost, seeded)
    assert problem.stochastic
    np.testing.assert_array_equal(problem.system.C, config.model.C)
    L = np.zeros((1, 2))
    K0 = LmiInitializer(epsilon=5.0)(problem, L)
    assert verify_stabilizer(K0, L, config.model, stochastic=True)
    assert np.linalg.norm(K0, 2) < 1e3


def test_learned_loop_with_exact_evaluations_matches_model(population_system, population_cost):
    cfg = DualLoopConfig(xi=1e-9)
    problem = RiccatiProblem.sare(population_system, population_cost)

    def regress(K, L):
        P = solve_generalized_lyapunov(problem.operator(K, L), problem.stage_weight(K, L))
        return LearnedStep(
            P=P,
            K=gain_from_value(P, problem),
            L=gain_from_value(P, problem, "disturbance"),
            residual=0.0,
            Lambda=population_system.D.T @ P @ population_system.D,
        )

    learned = learned_dual_loop(regress, problem, cfg, LmiInitializer(epsilon=5.0))
    model, model_trace = outer_loop_sare(population_system, population_cost, cfg)
    np.testing.assert_allclose(learned.P, model.P, rtol=1e-7)
    assert learned.iterations == model_trace.outer_count
    assert learned.Lambda is not None

    table = relative_error_table(model_trace, learned, population_system.D)
    assert len(table) == model_trace.outer_count
    assert max(row["P"] for row in table) < 1e-7
    assert max(row["Lambda"] for row in table) < 1e-7
    assert np.isnan(table[0]["Pi"])


def test_error_table_pads_shorter_traces(population_system, population_cost):
    model, trace = outer_loop_sare(population_system, population_cost)
    short = LearnedSolution(P=model.P, K=model.K, L=model.L, trace=type(trace)(label="short", steps=trace.steps[-1:]))
    table = relative_error_table(trace, short, population_system.D)
    assert len(table) == trace.outer_count
    assert table[-1]["P"] == pytest.approx(0.0, abs=1e-12)
    assert np.isnan(table[0]["Lambda"])


def test_relative_error_against_zero_reference():
    assert relative_error(np.eye(2), 2 * np.eye(2)) == pytest.approx(0.5)
    assert relative_error(np.ones((1, 2)), np.zeros((1, 2))) == pytest.approx(np.sqrt(2.0))


def test_parameter_vector_length_is_checked():
    with pytest.raises(ValueError):
        ThetaP.from_vector(np.zeros(7), 2, 1, 1)
    with pytest.raises(ValueError):
        ThetaPi.from_vector(np.zeros(8), 2, 1, 1)
