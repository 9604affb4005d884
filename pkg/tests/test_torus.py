import numpy as np
import pytest
from scipy.special import iv

from oracles import torus_quad
from msldp.errors import SolverError
from msldp.model import build_model
from msldp.torus import (DiscreteOperator, GridFunction, TorusGrid,
                         assemble_generator, build_operator_1d, diff_matrices,
                         principal_eigenpair, quadrature, stationary_density,
                         solve_with_null_constraint)


def test_grid_requires_power_of_two():
    with pytest.raises(ValueError):
        TorusGrid(1, 100)
    g = TorusGrid(1, 64)
    assert g.h == 1 / 64
    assert g.size == 64


def test_quadrature_unit_mass():
    g = TorusGrid(1, 64)
    assert quadrature(GridFunction(g, np.ones(64))) == 1.0


def test_quadrature_orthogonality():
    g = TorusGrid(1, 64)
    f = GridFunction(g, np.cos(2 * np.pi * g.nodes()))
    assert abs(quadrature(f)) <= 1e-14


def test_quadrature_bessel_identity():
    # oracle: adaptive quadrature of exp(-cos(2 pi y)) equals I_0(1)
    oracle = torus_quad(lambda y: np.exp(-np.cos(2 * np.pi * y)))
    assert abs(oracle - iv(0, 1.0)) < 1e-12
    g = TorusGrid(1, 256)
    f = GridFunction(g, np.exp(-np.cos(2 * np.pi * g.nodes())))
    assert abs(quadrature(f) - oracle) <= 1e-10


def test_quadrature_2d():
    g = TorusGrid(2, 32)
    y1, y2 = np.meshgrid(g.nodes(), g.nodes(), indexing="ij")
    f = GridFunction(g, np.exp(np.sin(2 * np.pi * y1) * np.cos(2 * np.pi * y2)))
    oracle = 1.1309968798433272  # scipy.integrate.dblquad of the same integrand
    assert abs(quadrature(f) - oracle) <= 1e-8


@pytest.mark.parametrize("scheme", ["fd2", "spectral"])
def test_generator_kills_constants(scheme):
    m = build_model({"dim": 1, "b": "0", "c": "0", "sigma": "sqrt(2)",
                     "a": 2, "kappa": 1, "x0": 0})
    grid = TorusGrid(1, 128)
    op = assemble_generator(1, m, [0.0], None, grid, scheme)
    out = op.apply(np.ones(grid.n))
    norm = max(1.0, np.max(np.abs(op.matrix if not hasattr(op.matrix, "toarray")
                                  else op.matrix.toarray())))
    assert np.max(np.abs(out)) <= 1e-12 * norm


@pytest.mark.parametrize("scheme", ["fd2", "spectral"])
def test_generator_rowsums_langevin(figure1_model, scheme):
    grid = TorusGrid(1, 128)
    op = assemble_generator(1, figure1_model, [0.0], None, grid, scheme)
    out = op.apply(np.ones(grid.n))
    assert np.max(np.abs(out)) <= 1e-9


def test_pure_advection_on_sine():
    m = build_model({"dim": 1, "b": "0", "c": "1", "sigma": "1",
                     "a": 0.5, "kappa": 1, "x0": 0})
    errs = []
    for n in (64, 128):
        grid = TorusGrid(1, n)
        op = assemble_generator(3, m, [0.0], None, grid, "fd2")
        got = op.apply(np.sin(2 * np.pi * grid.nodes()))
        expect = 2 * np.pi * np.cos(2 * np.pi * grid.nodes())
        errs.append(np.max(np.abs(got - expect)))
    assert errs[0] <= 0.05
    assert 3.0 <= errs[0] / errs[1] <= 5.0   # second order


def test_fd2_generator_residual_on_cell_solution(figure1_model):
    # apply the FD generator to a near-exact chi; residual decays at O(h^2)
    from msldp.homogenize import solve_cell_problem
    errs = []
    for n in (128, 256):
        grid = TorusGrid(1, n)
        chi, _, _, _ = solve_cell_problem(figure1_model, [0.0], grid,
                                          scheme="spectral")
        op = assemble_generator(1, figure1_model, [0.0], None, grid, "fd2")
        b = figure1_model.coefficients.b_at(np.zeros((n, 1)),
                                            grid.nodes()[:, None])[:, 0]
        res = op.apply(chi.values[:, 0]) + b
        errs.append(np.max(np.abs(res)))
    assert 3.0 <= errs[0] / errs[1] <= 5.0


def test_stationary_density_uniform():
    m = build_model({"dim": 1, "b": "0", "c": "0", "sigma": "sqrt(2)",
                     "a": 2, "kappa": 1, "x0": 0})
    grid = TorusGrid(1, 64)
    op = assemble_generator(1, m, [0.0], None, grid, "spectral")
    mu = stationary_density(op)
    assert np.max(np.abs(mu.values - 1.0)) <= 1e-10


def test_stationary_density_gibbs(figure1_model):
    grid = TorusGrid(1, 256)
    op = assemble_generator(1, figure1_model, [0.0], None, grid, "spectral")
    mu = stationary_density(op)
    y = grid.nodes()
    Q = np.cos(2 * np.pi * y) + np.sin(2 * np.pi * y)
    Z = torus_quad(lambda t: np.exp(-(np.cos(2 * np.pi * t)
                                      + np.sin(2 * np.pi * t))))
    assert abs(Z - iv(0, np.sqrt(2))) < 1e-12   # Z = I_0(sqrt(2))
    gibbs = np.exp(-Q) / Z
    assert np.max(np.abs(mu.values - gibbs) / gibbs) <= 1e-8
    assert abs(quadrature(mu) - 1.0) <= 1e-10


def test_stationary_density_conservation(figure1_model):
    grid = TorusGrid(1, 128)
    op = assemble_generator(1, figure1_model, [0.3], None, grid, "spectral")
    mu = stationary_density(op)
    rng = np.random.default_rng(4)
    for _ in range(5):
        coef = rng.standard_normal(5)
        y = grid.nodes()
        f = sum(c * np.sin(2 * np.pi * (k + 1) * y) for k, c in enumerate(coef))
        val = quadrature(GridFunction(grid, mu.values * op.apply(f)))
        assert abs(val) <= 1e-9


def test_principal_eigenpair_of_generator(figure1_model):
    grid = TorusGrid(1, 128)
    op = assemble_generator(1, figure1_model, [0.0], None, grid, "spectral")
    lam, phi = principal_eigenpair(op)
    norm = np.max(np.abs(np.asarray(op.matrix)))
    assert abs(lam) <= 1e-9 * norm
    assert np.max(np.abs(phi.values - 1.0)) <= 1e-7


def test_principal_eigenpair_shift():
    m = build_model({"dim": 1, "b": "sin(2*pi*y)", "c": "0", "sigma": "1",
                     "a": 2, "kappa": 1, "x0": 0})
    grid = TorusGrid(1, 64)
    op = assemble_generator(1, m, [0.0], None, grid, "spectral")
    lam0, phi0 = principal_eigenpair(op)
    shifted = DiscreteOperator(np.asarray(op.matrix) + 2.5 * np.eye(grid.n),
                               grid, op.scheme)
    lam1, phi1 = principal_eigenpair(shifted)
    assert abs(lam1 - (lam0 + 2.5)) <= 1e-8
    assert np.max(np.abs(phi1.values - phi0.values)) <= 1e-7


def test_twisted_constant_coefficient_eigenvalue():
    # Cole-Hopf reduction: constant sigma0, twist zeta -> principal
    # eigenvalue sigma0^2 zeta^2 / (2 gamma) with constant eigenfunction
    grid = TorusGrid(1, 64)
    sigma0, zeta, gamma = 1.3, 0.8, 0.7
    s2 = sigma0 ** 2
    op = build_operator_1d(grid, np.full(grid.n, s2 * zeta),
                           np.full(grid.n, 0.5 * gamma * s2),
                           np.full(grid.n, s2 * zeta ** 2 / (2 * gamma)),
                           scheme="spectral")
    lam, phi = principal_eigenpair(op)
    assert abs(lam - s2 * zeta ** 2 / (2 * gamma)) <= 1e-10
    assert np.max(np.abs(phi.values - 1.0)) <= 1e-8


def test_complex_dominant_eigenvalue_detected():
    grid = TorusGrid(1, 4)
    rot = np.array([[0.0, -1.0, 0, 0], [1.0, 0.0, 0, 0],
                    [0, 0, 0.0, -1.0], [0, 0, 1.0, 0.0]])
    with pytest.raises(SolverError):
        principal_eigenpair(DiscreteOperator(rot, grid, "fd2"))


def test_solve_with_null_constraint_weighted_mean(figure1_model):
    grid = TorusGrid(1, 128)
    op = assemble_generator(1, figure1_model, [0.0], None, grid, "spectral")
    mu = stationary_density(op)
    b = figure1_model.coefficients.b_at(np.zeros((grid.n, 1)),
                                        grid.nodes()[:, None])[:, 0]
    u, mult = solve_with_null_constraint(op, -b, mu.values.ravel(),
                                         null_vector=mu.values.ravel())
    assert abs(np.sum(u * mu.values.ravel()) * grid.h) <= 1e-9
    assert abs(mult) <= 1e-7


def test_grid_refinement_second_order_fd2():
    # differentiation residual of a smooth function drops ~4x per doubling
    errs = []
    for n in (64, 128, 256):
        D1, _ = diff_matrices(n, "fd2")
        y = np.arange(n) / n
        f = np.exp(np.sin(2 * np.pi * y))
        df = 2 * np.pi * np.cos(2 * np.pi * y) * f
        errs.append(np.max(np.abs(D1 @ f - df)))
    assert 3.0 <= errs[0] / errs[1] <= 5.0
    assert 3.0 <= errs[1] / errs[2] <= 5.0


def test_assemble_generator_2d_separable(figure1_model):
    spec = {"dim": 2, "Q": "cos(2*pi*y_1)+sin(2*pi*y_2)", "b1": "-dQ/dy_1",
            "b2": "-dQ/dy_2", "c1": "0", "c2": "0", "sigma11": "sqrt(2)",
            "sigma12": "0", "sigma21": "0", "sigma22": "sqrt(2)",
            "a": 2, "kappa": 1, "x0": "0,0"}
    m = build_model(spec)
    grid = TorusGrid(2, 32)
    op = assemble_generator(1, m, [0.0, 0.0], None, grid, "spectral")
    out = op.apply(np.ones(grid.size))
    assert np.max(np.abs(out)) <= 1e-8
    mu = stationary_density(op)
    assert abs(quadrature(mu) - 1.0) <= 1e-10
    # product Gibbs density
    y1, y2 = np.meshgrid(grid.nodes(), grid.nodes(), indexing="ij")
    gibbs = np.exp(-(np.cos(2 * np.pi * y1) + np.sin(2 * np.pi * y2)))
    gibbs /= gibbs.mean()
    assert np.max(np.abs(mu.values - gibbs) / gibbs) <= 1e-7
