import math

import numpy as np
import pytest
from scipy.integrate import quad

from conftest import langevin_spec
from oracles import lp_local_rate_r2, torus_quad, wfield_local_rate_r3
from msldp import ratefn
from msldp.errors import BracketError, DimensionError
from msldp.homogenize import solve_at
from msldp.model import build_model
from msldp.simulate import DiscretePath
from msldp.torus import TorusGrid, assemble_generator, stationary_density


# ---------------------------------------------------------------------------
# Regime 1


def test_r1_zero_at_effective_drift(figure1_point):
    res = ratefn.local_rate_r1(figure1_point, [-1.0], figure1_point.r)
    assert abs(res.value) <= 1e-14


def test_r1_scalar_arithmetic():
    m = build_model({"dim": 1, "b": "0", "c": "0", "sigma": "sqrt(2)",
                     "a": 2, "kappa": 1, "x0": 0})
    point = solve_at(m, [0.0], TorusGrid(1, 64))
    assert abs(point.q[0, 0] - 2.0) <= 1e-12   # r = 0, q = 2
    res = ratefn.local_rate_r1(point, [0.0], [1.0])
    assert abs(res.value - 0.25) <= 1e-12


def test_r1_flat_fast_potential_is_classical():
    m = build_model(langevin_spec(Q="0", D=1))
    for x in (-1.2, 0.3, 0.9):
        point = solve_at(m, [x], TorusGrid(1, 64))
        for beta in (-1.0, 0.5, 2.0):
            res = ratefn.local_rate_r1(point, [x], [beta])
            vp = 6 * x * (x * x - 1)
            assert abs(res.value - (beta + vp) ** 2 / 4.0) <= 1e-10


def test_r1_attaining_control_cost(figure1_point):
    # the returned control attains the value: integral |u|^2 dmu = 2 L1
    p = figure1_point
    res = ratefn.local_rate_r1(p, [-1.0], [1.0])
    u = res.control(p.grid.nodes())
    cost = 0.5 * np.sum(u ** 2 * p.mu.values) * p.grid.h
    assert abs(cost - res.value) <= 1e-8 * (1 + res.value)


def test_r1_convexity(figure1_point):
    rng = np.random.default_rng(2)
    L = ratefn.r1_evaluator(figure1_point)
    for _ in range(200):
        b1, b2 = rng.uniform(-3, 3, 2)
        al = rng.random()
        lhs = L(0.0, al * b1 + (1 - al) * b2)
        rhs = al * L(0.0, b1) + (1 - al) * L(0.0, b2)
        assert lhs <= rhs + 1e-8


# ---------------------------------------------------------------------------
# Regime 2


def test_dual_r2_constant_coefficients(trivial_r2_model):
    s0 = 1.5
    for zeta in (-1.2, -0.3, 0.0, 0.7, 2.0):
        lt, sol = ratefn.dual_r2(trivial_r2_model, [0.0], zeta, TorusGrid(1, 128))
        assert abs(lt - (-s0 ** 2 * zeta ** 2 / 2)) <= 1e-9 * (1 + zeta ** 2)
        assert abs(sol.h + lt) <= 1e-15
        assert sol.psi.values.min() > 0


def test_dual_r2_zero_twist_is_free(trivial_r2_model):
    lt, _ = ratefn.dual_r2(trivial_r2_model, [0.0], 0.0, TorusGrid(1, 64))
    assert abs(lt) <= 1e-10


def test_local_rate_r2_constant_legendre(trivial_r2_model):
    s0 = 1.5
    res = ratefn.local_rate_r2(trivial_r2_model, [0.0], 1.2, zmax=6.0,
                               grid=TorusGrid(1, 128))
    assert abs(res.value - 1.2 ** 2 / (2 * s0 ** 2)) <= 1e-8
    assert abs(res.dual[0] - 1.2 / s0 ** 2) <= 1e-4


GENERIC_R2 = {"dim": 1, "b": "0.5*sin(2*pi*y)", "c": "0.3*cos(2*pi*y)+0.4",
              "sigma": "1", "a": 1, "kappa": 1, "x0": 0}


def test_local_rate_r2_zero_cost_velocity():
    # beta_0 = integral (gamma b + c) dmu_0 with mu_0 the zero-control density
    m = build_model(GENERIC_R2)
    grid = TorusGrid(1, 256)
    op = assemble_generator(2, m, [0.0], None, grid, "spectral")
    mu0 = stationary_density(op)
    y = grid.nodes()[:, None]
    X = np.zeros((grid.n, 1))
    drift = (m.coefficients.b_at(X, y)[:, 0] + m.coefficients.c_at(X, y)[:, 0])
    beta0 = float(np.sum(drift * mu0.values) * grid.h)
    res = ratefn.local_rate_r2(m, [0.0], beta0, zmax=6.0, grid=grid)
    assert res.value <= 1e-8
    assert abs(res.dual[0]) <= 1e-3


def test_local_rate_r2_vs_occupation_measure_oracle():
    m = build_model(GENERIC_R2)
    res = ratefn.local_rate_r2(m, [0.0], 2.0, zmax=8.0, grid=TorusGrid(1, 256))
    lp = lp_local_rate_r2(m, 0.0, 2.0, ny=16, nz=9, zlo=-1.0, zhi=3.0)
    assert abs(res.value - lp) / res.value <= 0.05


def test_r2_duality_consistency():
    m = build_model(GENERIC_R2)
    res = ratefn.local_rate_r2(m, [0.0], 1.5, zmax=8.0, grid=TorusGrid(1, 128))
    zeta, sol = res.dual
    lt, sol2 = ratefn.dual_r2(m, [0.0], zeta, TorusGrid(1, 128))
    assert abs(res.value - (zeta * 1.5 - sol2.h)) <= 1e-6


def test_r2_bracket_error_reports_zmax(trivial_r2_model):
    with pytest.raises(BracketError, match="2.0"):
        ratefn.local_rate_r2(trivial_r2_model, [0.0], 25.0, zmax=2.0,
                             grid=TorusGrid(1, 64))


def test_r2_hjb_residual(trivial_r2_model):
    m = build_model(GENERIC_R2)
    for beta in (0.8, 1.6):
        res = ratefn.local_rate_r2(m, [0.0], beta, zmax=8.0,
                                   grid=TorusGrid(1, 256))
        assert res.dual[1].hjb_residual() <= 1e-7


def test_r2_convexity():
    m = build_model(GENERIC_R2)
    grid = TorusGrid(1, 128)
    L = {}

    def rate(b):
        if b not in L:
            L[b] = ratefn.local_rate_r2(m, [0.0], b, zmax=10.0, grid=grid).value
        return L[b]

    rng = np.random.default_rng(6)
    for _ in range(5):
        b1, b2 = rng.uniform(-1.0, 2.5, 2)
        al = rng.random()
        assert rate(round(al * b1 + (1 - al) * b2, 12)) <= \
            al * rate(b1) + (1 - al) * rate(b2) + 1e-8


def test_r2_requires_1d():
    spec = {"dim": 2, "b1": "0", "b2": "0", "c1": "0", "c2": "0",
            "sigma11": "1", "sigma12": "0", "sigma21": "0", "sigma22": "1",
            "a": 1, "kappa": 1, "x0": "0,0"}
    with pytest.raises(DimensionError):
        ratefn.local_rate_r2(build_model(spec), [0.0, 0.0], [1.0, 0.0])


# ---------------------------------------------------------------------------
# Regime 3


def test_r3_closed_form_constant_sigma():
    m = build_model({"dim": 1, "b": "0", "c": "0", "sigma": "1",
                     "a": 0.5, "kappa": 1, "x0": 0})
    res = ratefn.local_rate_r3(m, [0.0], 2.0)
    assert abs(res.value - 2.0) <= 1e-12
    assert res.dual > 0


def test_r3_closed_form_varying_sigma():
    # c = 0: L3 = beta^2/2 * (integral 1/sigma dy)^2
    m = build_model({"dim": 1, "b": "0", "c": "0",
                     "sigma": "1.5+0.5*cos(2*pi*y)", "a": 0.5, "kappa": 1,
                     "x0": 0})
    inv = torus_quad(lambda y: 1.0 / (1.5 + 0.5 * np.cos(2 * np.pi * y)))
    for beta in (0.5, 1.0, -2.0):
        res = ratefn.local_rate_r3(m, [0.0], beta)
        assert abs(res.value - 0.5 * beta ** 2 * inv ** 2) <= 1e-8


def test_r3_vs_brute_force_field_oracle():
    m = build_model({"dim": 1, "b": "0", "c": "0.3", "sigma": "1",
                     "a": 0.5, "kappa": 1, "x0": 0})
    res = ratefn.local_rate_r3(m, [0.0], 1.0, n=256)
    oracle = wfield_local_rate_r3(np.full(256, 0.3), np.ones(256), 1.0)
    assert abs(res.value - oracle) <= 1e-4
    # subcritical velocity needs a negative multiplier
    res2 = ratefn.local_rate_r3(m, [0.0], 0.1, n=256)
    assert res2.dual < 0
    assert abs(res2.value - 0.5 * (0.1 - 0.3) ** 2) <= 1e-10


def test_r3_varying_coefficients_vs_oracle():
    m = build_model({"dim": 1, "b": "0", "c": "0.3+0.2*cos(2*pi*y)",
                     "sigma": "1+0.25*sin(2*pi*y)", "a": 0.5, "kappa": 1,
                     "x0": 0})
    y = np.arange(256) / 256
    c = 0.3 + 0.2 * np.cos(2 * np.pi * y)
    s = 1 + 0.25 * np.sin(2 * np.pi * y)
    res = ratefn.local_rate_r3(m, [0.0], 1.3, n=256)
    oracle = wfield_local_rate_r3(c, s, 1.3)
    assert abs(res.value - oracle) <= 1e-4


def test_r3_reflection_symmetry():
    m_pos = build_model({"dim": 1, "b": "0", "c": "0.3+0.2*cos(2*pi*y)",
                         "sigma": "1", "a": 0.5, "kappa": 1, "x0": 0})
    m_neg = build_model({"dim": 1, "b": "0", "c": "-(0.3+0.2*cos(2*pi*y))",
                         "sigma": "1", "a": 0.5, "kappa": 1, "x0": 0})
    a = ratefn.local_rate_r3(m_pos, [0.0], 1.1)
    b = ratefn.local_rate_r3(m_neg, [0.0], -1.1)
    assert abs(a.value - b.value) <= 1e-12
    y = np.linspace(0, 1, 7)
    assert np.max(np.abs(a.control(y) + b.control(y))) <= 1e-12


def test_r3_rejects_zero_velocity():
    m = build_model({"dim": 1, "b": "0", "c": "0.3", "sigma": "1",
                     "a": 0.5, "kappa": 1, "x0": 0})
    with pytest.raises(ValueError, match="beta = 0"):
        ratefn.local_rate_r3(m, [0.0], 0.0)


def test_r3_sojourn_constraint_holds():
    m = build_model({"dim": 1, "b": "0", "c": "0.3+0.2*cos(2*pi*y)",
                     "sigma": "1", "a": 0.5, "kappa": 1, "x0": 0})
    res = ratefn.local_rate_r3(m, [0.0], 1.0, n=512)
    y = np.arange(512) / 512
    c = 0.3 + 0.2 * np.cos(2 * np.pi * y)
    w = np.sqrt(c ** 2 + 2 * res.dual)
    assert abs(np.mean(1.0 / w) - 1.0) <= 1e-12


def test_r3_convexity():
    m = build_model({"dim": 1, "b": "0", "c": "0.2*cos(2*pi*y)", "sigma": "1",
                     "a": 0.5, "kappa": 1, "x0": 0})
    rng = np.random.default_rng(8)
    L = ratefn.r3_evaluator(m, n=256)
    for _ in range(40):
        b1, b2 = rng.uniform(0.2, 3.0, 2)
        al = rng.random()
        assert L(0.0, al * b1 + (1 - al) * b2) <= \
            al * L(0.0, b1) + (1 - al) * L(0.0, b2) + 1e-8


# ---------------------------------------------------------------------------
# Action functional


def test_action_constant_path_at_drift_zero():
    m = build_model(langevin_spec(Q="0"))
    point = solve_at(m, [1.0], TorusGrid(1, 64))   # r(1) = -V'(1) = 0
    L = ratefn.r1_evaluator(point)
    path = DiscretePath(times=np.linspace(0, 1, 33),
                        states=np.full((33, 1), 1.0))
    assert ratefn.action(path, L) <= 1e-12


def test_action_forward_flow_is_free():
    # follow dx/dt = r(x) = -V'(x); the action vanishes up to quadrature error
    m = build_model(langevin_spec(Q="0"))
    ts = np.linspace(0, 1, 257)
    xs = np.empty_like(ts)
    xs[0] = 0.5
    for k in range(len(ts) - 1):   # fine RK4 for the flow
        h = ts[1] - ts[0]
        x = xs[k]

        def f(u):
            return -6 * u * (u * u - 1)

        k1 = f(x)
        k2 = f(x + h * k1 / 2)
        k3 = f(x + h * k2 / 2)
        k4 = f(x + h * k3)
        xs[k + 1] = x + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6

    def L(x, beta):
        return (np.asarray(beta) + 6 * np.asarray(x) * (np.asarray(x) ** 2 - 1)) ** 2 / 4.0

    path = DiscretePath(times=ts, states=xs[:, None])
    assert ratefn.action(path, L) <= 1e-5


def test_action_straight_line_vs_quadrature_oracle():
    # S = integral (1 + V'(x_t))^2/(4 D) dt on x_t = -1 + t
    oracle = quad(lambda t: (1 + 6 * (-1 + t) * ((-1 + t) ** 2 - 1)) ** 2 / 4.0,
                  0.0, 1.0, limit=200)[0]
    M = 2048
    ts = np.linspace(0, 1, M + 1)
    path = DiscretePath(times=ts, states=(-1 + ts)[:, None])

    def L(x, beta):
        return (np.asarray(beta) + 6 * np.asarray(x) * (np.asarray(x) ** 2 - 1)) ** 2 / 4.0

    val = ratefn.action(path, L)
    assert abs(val - oracle) <= 1e-5 * (1 + oracle)


def test_action_propagates_failure_as_inf():
    m = build_model({"dim": 1, "b": "0", "c": "0.3", "sigma": "1",
                     "a": 0.5, "kappa": 1, "x0": 0})
    L = ratefn.r3_evaluator(m)
    path = DiscretePath(times=np.linspace(0, 1, 5),
                        states=np.array([0.0, 0.1, 0.1, 0.2, 0.3])[:, None])
    assert ratefn.action(path, L) == math.inf   # one interval has beta = 0


# ---------------------------------------------------------------------------
# Matrix Hoelder inequality (local property scale; the full 1000-sample
# suite runs in the acceptance module)


def test_hoelder_inequality_and_rank_one_equality():
    rng = np.random.default_rng(42)
    n, d = 48, 2
    for _ in range(200):
        mu = rng.random(n) + 0.05
        mu /= mu.sum()
        kappa = rng.standard_normal((n, d, d))
        u = rng.standard_normal((n, d))
        beta = np.einsum("kij,kj,k->i", kappa, u, mu)
        q = np.einsum("kij,klj,k->il", kappa, kappa, mu)
        q = 0.5 * (q + q.T)
        lhs = beta @ np.linalg.solve(q, beta)
        rhs = np.sum(np.sum(u * u, axis=1) * mu)
        assert lhs <= rhs + 1e-12
        # equality on the rank-one construction u = kappa^T q^{-1} beta0
        beta0 = rng.standard_normal(d)
        w = np.linalg.solve(q, beta0)
        u_star = np.einsum("kji,j->ki", kappa, w)
        beta_star = np.einsum("kij,kj,k->i", kappa, u_star, mu)
        lhs_star = beta_star @ np.linalg.solve(q, beta_star)
        rhs_star = np.sum(np.sum(u_star * u_star, axis=1) * mu)
        assert abs(lhs_star - rhs_star) <= 1e-10 * (1 + rhs_star)
