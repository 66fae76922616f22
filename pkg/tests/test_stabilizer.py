import numpy as np
import pytest

from robust_mfsc.errors import StabilizerError
from robust_mfsc.lyapunov import LyapOperatorSpec, is_ms_stable
from robust_mfsc.riccati import RiccatiProblem
from robust_mfsc.stabilizer import (
    LmiInitializer,
    LmiProblem,
    UserGainInitializer,
    ZeroGainInitializer,
    find_stabilizing_gain,
    make_initializer,
    verify_stabilizer,
)

from conftest import scalar_cost, scalar_system


def test_lmi_gain_stabilizes_population_example(population_system, population_cost):
    problem = RiccatiProblem.sare(population_system, population_cost)
    L = np.zeros((1, 2))
    assert not is_ms_stable(problem.operator(np.zeros((1, 2)), L))
    K0 = LmiInitializer(epsilon=5.0)(problem, L)
    assert K0.shape == (1, 2)
    assert verify_stabilizer(K0, L, population_system)


def test_lmi_respects_frozen_disturbance_gain(population_system, population_cost):
    problem = RiccatiProblem.sare(population_system, population_cost)
    L = np.array([[2.0, 1.0]])
    K0 = LmiInitializer(epsilon=1.0)(problem, L)
    assert is_ms_stable(LyapOperatorSpec(sys=population_system, K=K0, L=L))


def test_zero_gain_shortcut():
    prob = LmiProblem(A_eff=[[-1.0]], B=[[1.0]], C=[[0.0]], D=[[0.0]])
    np.testing.assert_array_equal(find_stabilizing_gain(prob), [[0.0]])


def test_deterministic_instance_drops_noise_block():
    prob = LmiProblem(A_eff=[[1.0]], B=[[1.0]], C=[[5.0]], D=[[0.0]], epsilon=1.0, stochastic=False)
    K0 = find_stabilizing_gain(prob)
    assert 1.0 - K0[0, 0] < 0


def test_deterministic_population_gain_has_moderate_norm(population_system):
    prob = LmiProblem(
        A_eff=population_system.A,
        B=population_system.B,
        C=population_system.C,
        D=population_system.D,
        epsilon=5.0,
        stochastic=False,
    )
    K0 = find_stabilizing_gain(prob)
    assert verify_stabilizer(K0, np.zeros((1, 2)), population_system, stochastic=False)
    assert np.linalg.norm(K0, 2) < 1e3


def test_scalar_gain_scales_with_margin():
    # X >= 1 and 2X + 2Y <= -eps give X = 1, Y = -(eps + 2) / 2
    prob = LmiProblem(A_eff=[[1.0]], B=[[1.0]], C=[[0.0]], D=[[0.0]], epsilon=5.0, stochastic=False)
    K0 = find_stabilizing_gain(prob)
    assert K0[0, 0] == pytest.approx(3.5, rel=1e-2)


def test_lmi_rejects_nonpositive_floor():
    with pytest.raises(ValueError, match="floor"):
        LmiProblem(A_eff=[[1.0]], B=[[1.0]], C=[[0.0]], D=[[0.0]], x_floor=0.0)


def test_unstabilizable_system_raises():
    prob = LmiProblem(A_eff=[[1.0]], B=[[0.0]], C=[[0.0]], D=[[0.0]], epsilon=1.0)
    with pytest.raises(StabilizerError, match="no stabilizer found"):
        find_stabilizing_gain(prob)


def test_zero_gain_initializer_refuses_unstable_open_loop():
    problem = RiccatiProblem.sare(scalar_system(0.5), scalar_cost())
    with pytest.raises(StabilizerError, match="zero gain"):
        ZeroGainInitializer()(problem, np.zeros((1, 1)))


def test_user_gain_falls_back_to_lmi():
    problem = RiccatiProblem.sare(scalar_system(0.5), scalar_cost())
    L = np.zeros((1, 1))
    assert UserGainInitializer(K0=[[2.0]])(problem, L)[0, 0] == 2.0
    with pytest.raises(StabilizerError):
        UserGainInitializer(K0=[[0.1]])(problem, L)
    K0 = UserGainInitializer(K0=[[0.1]], fallback=LmiInitializer(epsilon=1.0))(problem, L)
    assert verify_stabilizer(K0, L, problem.system)


def test_make_initializer_modes():
    assert isinstance(make_initializer("lmi", 5.0), LmiInitializer)
    assert isinstance(make_initializer("zero-check", 5.0), ZeroGainInitializer)
    assert isinstance(make_initializer("user", 5.0, np.ones((1, 2))), UserGainInitializer)
    with pytest.raises(ValueError):
        make_initializer("user", 5.0)
    with pytest.raises(ValueError):
        make_initializer("random", 5.0)


def test_unstable_scalar_with_small_margin():
    prob = LmiProblem(A_eff=[[1.0]], B=[[1.0]], C=[[0.0]], D=[[0.0]], epsilon=0.1)
    K0 = find_stabilizing_gain(prob)
    assert 2.0 * (1.0 - K0[0, 0]) < 0
