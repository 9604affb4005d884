import numpy as np
import pytest

from msldp.pathopt import PathProblem, PiecewiseConstantSchedule, _gradient, \
    minimize_action


def classical_rate(x, beta):
    """(beta + V'(x))^2 / (4 D) for the flat-fast double-well, D = 1."""
    x = np.asarray(x, dtype=float)
    beta = np.asarray(beta, dtype=float)
    return (beta + 6.0 * x * (x * x - 1.0)) ** 2 / 4.0


def test_problem_validation():
    with pytest.raises(ValueError):
        PathProblem(T=1.0, knots=1, x0=[0.0])
    with pytest.raises(ValueError):
        PathProblem(T=-1.0, knots=4, x0=[0.0])


def test_zero_cost_flow_free_endpoint():
    prob = PathProblem(T=1.0, knots=32, x0=[-0.5])
    res = minimize_action(prob, classical_rate)
    assert res.converged
    assert res.value <= 1e-6


def test_monotone_descent_and_flagging():
    prob = PathProblem(T=2.0, knots=16, x0=[-1.0], endpoint=[0.0])
    res3 = minimize_action(prob, classical_rate, max_iter=3)
    res_full = minimize_action(prob, classical_rate, max_iter=100000)
    assert not res3.converged
    assert res_full.converged
    assert res_full.value <= res3.value


def test_gradient_richardson_consistency():
    rng = np.random.default_rng(1)
    states = np.linspace(-1.0, 0.0, 17)[:, None] + 0.05 * rng.standard_normal((17, 1))
    g1 = _gradient(states, 2.0 / 16, classical_rate, 1, None, False,
                   fd_scale=1e-5)
    g2 = _gradient(states, 2.0 / 16, classical_rate, 1, None, False,
                   fd_scale=5e-6)
    scale = np.max(np.abs(g1)) + 1e-12
    assert np.max(np.abs(g1 - g2)) / scale <= 1e-4


def test_multi_start_stability():
    prob = PathProblem(T=2.0, knots=32, x0=[-1.0], endpoint=[0.0])
    res_straight = minimize_action(prob, classical_rate, max_iter=200000)
    rng = np.random.default_rng(3)
    init = np.linspace([-1.0], [0.0], 33) + 0.05 * rng.standard_normal((33, 1))
    init[0], init[-1] = [-1.0], [0.0]
    res_perturbed = minimize_action(prob, classical_rate, init=init,
                                    max_iter=200000)
    assert abs(res_straight.value - res_perturbed.value) <= 1e-4


def test_refinement_changes_value_little():
    vals = {}
    for M in (32, 64):
        prob = PathProblem(T=2.0, knots=M, x0=[-1.0], endpoint=[0.0])
        vals[M] = minimize_action(prob, classical_rate, max_iter=200000).value
    assert abs(vals[32] - vals[64]) <= 0.01


def test_schedule_is_piecewise_constant_velocity():
    prob = PathProblem(T=1.0, knots=8, x0=[0.0], endpoint=[1.0])
    res = minimize_action(prob, lambda x, b: np.asarray(b) ** 2,
                          max_iter=10000)
    s = res.schedule
    assert isinstance(s, PiecewiseConstantSchedule)
    vel = np.diff(res.path.states, axis=0) / (1.0 / 8)
    assert np.allclose(s(0.05), vel[0])
    assert np.allclose(s(0.99), vel[-1])
    # quadratic kinetic action: optimal velocity is uniform
    assert np.max(np.abs(vel - 1.0)) <= 1e-4


def test_terminal_cost_gradient_used():
    prob = PathProblem(T=1.0, knots=16, x0=[0.0],
                       terminal_cost=lambda x: float((x[0] - 0.5) ** 2))
    res = minimize_action(prob, lambda x, b: np.asarray(b) ** 2 / 4.0,
                          max_iter=50000)
    assert res.converged
    # quadratic-quadratic problem: minimize b^2/4*T + (x1-0.5)^2 over x1
    # with b = x1/T: optimum x1 = 0.5/(1 + 1/(4 T)) = 0.4
    assert abs(res.path.states[-1, 0] - 0.4) <= 1e-4


def test_infinite_initial_value_rejected():
    import math

    def bad_rate(x, beta):
        return np.full(np.broadcast(np.asarray(x), np.asarray(beta)).shape,
                       math.inf)

    with pytest.raises(ValueError, match="finite"):
        minimize_action(PathProblem(T=1.0, knots=8, x0=[0.0], endpoint=[1.0]),
                        bad_rate)
