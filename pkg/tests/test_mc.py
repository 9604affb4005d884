import math

import numpy as np
import pytest

from msldp import mc
from msldp.errors import NonFiniteError
from msldp.model import build_model

OU = {"dim": 1, "b": "0", "c": "-x", "sigma": "sqrt(2)",
      "a": 1, "kappa": 1, "x0": 1.0}


def ou_model():
    return build_model(OU)


def test_constant_h_exact_mean_both_schemes():
    m = ou_model()
    h = mc.TerminalCost("0*x + 2.0")
    eps = 0.5
    expect = math.exp(-2.0 / eps)
    rep = mc.estimate(m, h, eps, 400, scheme="standard", seed=1, dt=0.01)
    assert rep.mean == expect
    assert rep.variance <= 1e-30
    zero = lambda t, X: np.zeros_like(X)
    rep_is = mc.estimate(m, h, eps, 400, scheme="is", control=zero,
                         seed=1, dt=0.01)
    assert rep_is.mean == expect
    assert rep_is.variance <= 1e-30


def test_report_invariants():
    m = ou_model()
    rep = mc.estimate(m, mc.TerminalCost("x^2"), 0.5, 2000, seed=5, dt=0.01)
    assert rep.variance >= 0
    assert rep.mean > 0
    assert rep.ci95[0] <= rep.mean <= rep.ci95[1]
    assert rep.n == 2000
    assert abs(rep.minus_eps_log_mean + 0.5 * math.log(rep.mean)) <= 1e-15


def test_standard_vs_is_agree():
    # unbiasedness cross-check with a constant tilt on the OU toy problem
    m = ou_model()
    h = mc.TerminalCost("x^2")
    eps = 0.5
    rep_std = mc.estimate(m, h, eps, 8000, scheme="standard", seed=11, dt=0.01)
    control = lambda t, X: -0.5 * np.ones_like(X)
    rep_is = mc.estimate(m, h, eps, 8000, scheme="is", control=control,
                         seed=11, dt=0.01)
    se = math.hypot(rep_std.rel_err * rep_std.mean, rep_is.rel_err * rep_is.mean)
    assert abs(rep_std.mean - rep_is.mean) <= 3 * se


def test_determinism_bit_identical():
    m = ou_model()
    h = mc.TerminalCost("x^2")
    a = mc.estimate(m, h, 0.5, 1000, seed=7, dt=0.01)
    b = mc.estimate(m, h, 0.5, 1000, seed=7, dt=0.01)
    assert a.mean == b.mean
    assert a.variance == b.variance
    assert a.ci95 == b.ci95
    d1, d2 = a.to_dict(), b.to_dict()
    d1.pop("wall_seconds")
    d2.pop("wall_seconds")
    assert d1 == d2


def test_threads_do_not_change_results():
    m = ou_model()
    h = mc.TerminalCost("x^2")
    a = mc.estimate(m, h, 0.5, 3000, seed=7, dt=0.01, threads=1, chunk=512)
    b = mc.estimate(m, h, 0.5, 3000, seed=7, dt=0.01, threads=4, chunk=512)
    assert a.mean == b.mean
    assert a.variance == b.variance


def test_merging_disjoint_seed_ranges():
    m = ou_model()
    h = mc.TerminalCost("x^2")
    full = mc.estimate(m, h, 0.5, 1000, seed=5, dt=0.01)
    part_a = mc.estimate(m, h, 0.5, 600, seed=5, dt=0.01)
    part_b = mc.estimate(m, h, 0.5, 400, seed=5, dt=0.01, index_offset=600)
    merged = mc.merge_reports(part_a, part_b)
    assert merged.n == 1000
    assert abs(merged.mean - full.mean) <= 1e-12 * abs(full.mean)
    assert abs(merged.variance - full.variance) <= 1e-12 * full.variance


def test_nan_sample_detection():
    m = ou_model()
    h = mc.TerminalCost("-200*x^2")   # exp(+200 x^2 / eps) overflows
    with np.errstate(over="ignore"):
        with pytest.raises(NonFiniteError, match="trajectory"):
            mc.estimate(m, h, 0.05, 200, seed=1, dt=0.01)


def test_running_cost_functional():
    m = ou_model()
    h = mc.RunningCost("x^2")
    rep = mc.estimate(m, h, 0.5, 500, seed=2, dt=0.01)
    assert rep.mean > 0
    # left-endpoint accumulation matches the path_value reduction
    from msldp.simulate import simulate
    p = simulate(m, 0.5, T=1.0, dt=0.01, seed=3)
    direct = h.path_value(p.times, p.states)
    assert direct > 0


def test_smoothed_indicator_shape():
    h = mc.SmoothedIndicator(center=0.0, width=0.5, height=2.0)
    assert h.terminal_value([0.0]) == 0.0
    assert h.terminal_value([10.0]) == 2.0
    mid = h.terminal_value([0.25])
    assert 0.0 < mid < 2.0
    with pytest.raises(ValueError):
        mc.SmoothedIndicator(0.0, -1.0)


def test_ldp_slope_zero_functional():
    m = ou_model()
    h = mc.TerminalCost("0*x")

    def L(x, beta):
        x = np.asarray(x, dtype=float)
        return (np.asarray(beta, dtype=float) + x) ** 2 / 4.0

    table = mc.ldp_slope(m, h, [0.5, 0.25], 200, scheme="standard", seed=1,
                         rate_fn=L, T=1.0, knots=16)
    assert abs(table.reference) <= 1e-6
    for r in table.rows:
        assert r.minus_eps_log_mean == 0.0


def test_ldp_slope_requires_decreasing_ladder():
    m = ou_model()
    with pytest.raises(ValueError, match="decreasing"):
        mc.ldp_slope(m, mc.TerminalCost("x^2"), [0.25, 0.5], 100,
                     rate_fn=lambda x, b: np.asarray(b) ** 2)
