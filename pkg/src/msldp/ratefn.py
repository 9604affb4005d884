"""Local rate functions for the three regimes and the pathwise action.

Regime 1 (explicit quadratic):
    L1(x, beta) = (1/2) (beta - r(x))^T q(x)^{-1} (beta - r(x)).

Regime 2 (d = 1, by convex duality):
    L2(x, beta) = sup_zeta [ zeta*beta - H(zeta) ],
where H is computed from a principal eigenvalue.  The ergodic Bellman
equation for the dual value is linearized exactly by the exponential
transform Wbar = -gamma log phi (its quadratic gradient term cancels),
and the quasi-periodicity phi(y+1) = exp(zeta/gamma) phi(y) is removed
by writing phi = exp(zeta*y/gamma) psi with psi periodic.  The principal
eigenvalue Lambda of the resulting twisted operator gives
H(zeta) = gamma*Lambda and Ltilde(zeta) = -H(zeta); the attaining
control is ubar(y) = -sigma^T grad(Wbar) = sigma*(zeta + gamma psi'/psi).

Regime 3 (d = 1, pointwise closed form):
    writing w(y) = c(x,y) + sigma(x,y) v(y) for the fast velocity (same
    sign as beta), the inner minimizer is w*(y; theta) =
    sqrt(c^2 + 2 sigma^2 theta); the scalar multiplier theta solves the
    mean-crossing-time constraint  integral beta / w* dy = 1  and is
    found by monotone bisection plus Newton polish.  beta < 0 is handled
    by the reflection (beta, c) -> (-beta, -c), v -> -v.

The pathwise action S(phi) = integral L(phi_t, dphi_t) dt is evaluated
by composite midpoint quadrature on a uniform knot grid.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import BracketError, DimensionError, SolverError
from .homogenize import HomogenizedModel, HomogenizedPoint
from .model import classify_regime
from .torus import (DiscreteOperator, GridFunction, TorusGrid, build_operator_1d,
                    principal_eigenpair)


@dataclass(frozen=True)
class LocalRateResult:
    """One local-rate evaluation: value, dual multiplier, attaining control."""

    regime: int
    x: np.ndarray
    beta: np.ndarray
    value: float
    dual: object          # zeta (Regime 2), theta (Regime 3), or None
    control: object       # callable y -> control value, or None

    def __post_init__(self):
        if self.value < 0 and self.value > -1e-12:
            object.__setattr__(self, "value", 0.0)


@dataclass(frozen=True)
class BellmanSolution:
    """Regime-2 dual data at one (x, zeta).

    psi is the positive periodic eigenfunction of the twisted operator;
    Wbar = -zeta*y - gamma*log(psi) is quasi-periodic with increment
    -zeta per period.  The stored gradient dwbar uses the discrete
    derivative of psi (not of log psi), which makes the discrete
    Bellman residual cancel exactly up to the eigenvalue residual.
    """

    zeta: float
    gamma: float
    htilde: float            # Ltilde(zeta) = -gamma * Lambda
    h: float                 # H(zeta) = -htilde
    eigenvalue: float        # Lambda
    psi: GridFunction
    wbar_periodic: np.ndarray
    dwbar: np.ndarray
    operator: DiscreteOperator

    def hjb_residual(self) -> float:
        """Sup-norm plug-in residual of the transformed Bellman equation."""
        psi = self.psi.values.ravel()
        res = -self.gamma * (self.operator.apply(psi).ravel()
                             - self.eigenvalue * psi) / psi
        return float(np.max(np.abs(res)))


# ---------------------------------------------------------------------------
# Regime 1


def _resolve_point(hom, x):
    if isinstance(hom, HomogenizedPoint):
        return hom, hom.r, hom.q
    if isinstance(hom, HomogenizedModel):
        if hom.d != 1:
            raise DimensionError("pass a HomogenizedPoint for d = 2 queries")
        xf = float(np.asarray(x).ravel()[0])
        hom.tabulate()
        nearest = hom.point(int(np.argmin(np.abs(hom.xs - xf))))
        return nearest, hom.r_at(xf), hom.q_at(xf)
    raise TypeError("hom must be a HomogenizedPoint or HomogenizedModel")


def local_rate_r1(hom, x, beta) -> LocalRateResult:
    """Explicit Regime-1 local rate (1/2)(beta-r)^T q^{-1} (beta-r).

    The attaining control sigma^T (I + dchi)^T q^{-1} (beta - r) is
    returned as a periodic interpolant of its grid values.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    point, r, q = _resolve_point(hom, x)
    try:
        cf = sla.cho_factor(q)
    except sla.LinAlgError as e:
        raise SolverError(f"effective diffusivity not SPD at x={x}") from e
    dev = beta - r
    value = 0.5 * float(dev @ sla.cho_solve(cf, dev))
    qinv_dev = sla.cho_solve(cf, dev)

    grid = point.grid
    d = len(point.x)
    M = point.transport().reshape(grid.size, d, d)
    # ugrid[k] = sigma(yk)^T M(yk)^T qinv_dev
    ugrid = np.einsum("kij,j->ki",
                      np.swapaxes(point.sigma_grid, -1, -2) @ np.swapaxes(M, -1, -2),
                      qinv_dev)

    if grid.d == 1:
        nodes = grid.nodes()
        vals = ugrid[:, 0]

        def control(yq):
            yq = np.asarray(yq, dtype=float).ravel() % 1.0
            return np.interp(yq, nodes, vals, period=1.0)
    else:
        def control(yq):
            yq = np.asarray(yq, dtype=float).reshape(-1, d) % 1.0
            idx = np.round(yq * grid.n).astype(int) % grid.n
            return ugrid[idx[:, 0] * grid.n + idx[:, 1]]

    return LocalRateResult(regime=1, x=x, beta=beta, value=value,
                           dual=None, control=control)


def r1_evaluator(hom):
    """Vectorized (x, beta) -> L1 for a lattice table or one point (d = 1)."""
    if isinstance(hom, HomogenizedPoint):
        if hom.r.size != 1:
            cf = sla.cho_factor(hom.q)
            r0 = hom.r

            def L(x, beta):
                dev = np.asarray(beta, dtype=float) - r0
                return 0.5 * float(dev @ sla.cho_solve(cf, dev))

            return L
        rs, qs = float(hom.r[0]), float(hom.q[0, 0])
        return lambda x, beta: 0.5 * (np.asarray(beta, dtype=float) - rs) ** 2 / qs

    if not isinstance(hom, HomogenizedModel) or hom.d != 1:
        raise DimensionError("vectorized Regime-1 evaluator needs d = 1")

    def L(x, beta):
        x = np.asarray(x, dtype=float)
        beta = np.asarray(beta, dtype=float)
        if x.ndim == 0:
            return 0.5 * (beta - hom.r_at(float(x))[0]) ** 2 / hom.q_at(float(x))[0, 0]
        r = hom.r_at(x)[..., 0]
        q = hom.q_at(x)[..., 0, 0]
        return 0.5 * (beta - r) ** 2 / q

    return L


# ---------------------------------------------------------------------------
# Regime 2 dual via the twisted principal eigenvalue (d = 1)


def _twisted_operator(model, x, zeta, grid, scheme) -> DiscreteOperator:
    coeff = model.coefficients
    _, gamma = classify_regime(model)
    if gamma is None:
        raise ValueError("model is not in Regime 2 (a != 1)")
    y = grid.nodes()[:, None]
    X = np.broadcast_to(np.asarray(x, dtype=float).reshape(1), (grid.n, 1))
    b = coeff.b_at(X, y)[:, 0]
    c = coeff.c_at(X, y)[:, 0]
    s2 = coeff.sigma_at(X, y)[:, 0, 0] ** 2
    adrift = gamma * b + c
    drift = adrift + s2 * zeta
    diffusion = 0.5 * gamma * s2
    potential = adrift * zeta / gamma + s2 * zeta ** 2 / (2.0 * gamma)
    return build_operator_1d(grid, drift, diffusion, potential, scheme), gamma


def dual_r2(model, x, zeta, grid: TorusGrid = None, scheme: str = "spectral",
            shift_hint: float = None):
    """Ltilde(zeta) and the Bellman data; also returns H(zeta) = -Ltilde.

    Sign convention: for constant coefficients b = c = 0, sigma = s0 the
    eigenfunction is constant, Lambda = s0^2 zeta^2 / (2 gamma), and
    Ltilde(zeta) = -s0^2 zeta^2 / 2.
    """
    if model.d != 1:
        raise DimensionError("the Regime-2 dual is implemented for d = 1")
    grid = grid or TorusGrid(1, 256)
    op, gamma = _twisted_operator(model, x, float(zeta), grid, scheme)
    try:
        lam, phi = principal_eigenpair(op, shift_hint=shift_hint,
                                       positivity_tol=1e-12)
    except SolverError:
        lam, phi = principal_eigenpair(op, positivity_tol=1e-12)
    psi = phi.values.ravel()
    h = gamma * lam
    ltilde = -h
    D1 = _d1_matrix(grid, scheme)
    dpsi = D1 @ psi
    dwbar = -float(zeta) - gamma * dpsi / psi
    sol = BellmanSolution(zeta=float(zeta), gamma=gamma, htilde=ltilde, h=h,
                          eigenvalue=lam, psi=phi,
                          wbar_periodic=-gamma * np.log(psi),
                          dwbar=dwbar, operator=op)
    return ltilde, sol


def _d1_matrix(grid, scheme):
    from .torus import diff_matrices
    import scipy.sparse as sp
    D1, _ = diff_matrices(grid.n, scheme)
    return D1.toarray() if sp.issparse(D1) else D1


def local_rate_r2(model, x, beta, zmax: float = 12.0, grid: TorusGrid = None,
                  scheme: str = "spectral", tol: float = 1e-10) -> LocalRateResult:
    """Regime-2 local rate by the strictly concave dual maximization.

    Golden-section search over zeta in [-zmax, zmax] followed by Newton
    refinement on the stationarity condition beta = H'(zeta), with H'
    from centered finite differences of the eigenvalue.
    """
    if model.d != 1:
        raise DimensionError("the Regime-2 local rate is implemented for d = 1")
    grid = grid or TorusGrid(1, 256)
    beta_f = float(np.asarray(beta).ravel()[0])
    cache = {}

    def H(z):
        if z not in cache:
            _, sol = dual_r2(model, x, z, grid, scheme)
            cache[z] = (sol.h, sol)
        return cache[z][0]

    def g(z):
        return z * beta_f - H(z)

    # gradient sign check at the box ends; H' brackets beta or there is
    # no interior maximizer within |zeta| <= zmax
    dz = 1e-6 * (1.0 + zmax)
    if beta_f - (H(-zmax + dz) - H(-zmax)) / dz < 0 \
            or beta_f - (H(zmax) - H(zmax - dz)) / dz > 0:
        raise BracketError(
            f"dual maximizer not bracketed in |zeta| <= {zmax} "
            f"(increase zmax)")

    lo, hi = -zmax, zmax
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c1 = hi - invphi * (hi - lo)
    c2 = lo + invphi * (hi - lo)
    g1, g2 = g(c1), g(c2)
    for _ in range(40):
        if hi - lo < 1e-4 * (1.0 + abs(lo) + abs(hi)):
            break
        if g1 < g2:
            lo, c1, g1 = c1, c2, g2
            c2 = lo + invphi * (hi - lo)
            g2 = g(c2)
        else:
            hi, c2, g2 = c2, c1, g1
            c1 = hi - invphi * (hi - lo)
            g1 = g(c1)
    zeta = 0.5 * (lo + hi)

    # Newton refinement on beta - H'(zeta) = 0
    step = 1e-5 * (1.0 + abs(zeta))
    for _ in range(12):
        hp = (H(zeta + step) - H(zeta - step)) / (2 * step)
        hpp = (H(zeta + step) - 2 * H(zeta) + H(zeta - step)) / step ** 2
        grad = beta_f - hp
        if abs(grad) <= tol * (1.0 + abs(beta_f)):
            break
        if hpp <= 0:
            break
        znew = zeta + grad / hpp
        zeta = float(np.clip(znew, -zmax, zmax))

    hval = H(zeta)
    sol = cache[zeta][1]
    value = zeta * beta_f - hval
    coeff = model.coefficients
    y = grid.nodes()[:, None]
    X = np.broadcast_to(np.asarray(x, dtype=float).reshape(1), (grid.n, 1))
    sig = coeff.sigma_at(X, y)[:, 0, 0]
    ubar = -sig * sol.dwbar

    def control(yq):
        yq = np.asarray(yq, dtype=float).ravel() % 1.0
        return np.interp(yq, grid.nodes(), ubar, period=1.0)

    return LocalRateResult(regime=2, x=np.atleast_1d(np.asarray(x, dtype=float)),
                           beta=np.atleast_1d(beta_f), value=max(value, 0.0),
                           dual=(zeta, sol), control=control)


def r2_evaluator(model, zmax: float = 12.0, grid: TorusGrid = None,
                 scheme: str = "spectral"):
    """Scalar (x, beta) -> L2 evaluator (one dual solve per call)."""

    def L(x, beta):
        xs = np.broadcast_arrays(np.asarray(x, dtype=float),
                                 np.asarray(beta, dtype=float))
        flat_x, flat_b = xs[0].ravel(), xs[1].ravel()
        out = np.array([local_rate_r2(model, xi, bi, zmax, grid, scheme).value
                        for xi, bi in zip(flat_x, flat_b)])
        return out.reshape(xs[0].shape) if xs[0].shape else float(out[0])

    return L


# ---------------------------------------------------------------------------
# Regime 3 (d = 1)


def local_rate_r3(model, x, beta, n: int = 1024) -> LocalRateResult:
    """Regime-3 local rate via the scalar multiplier theta.

    The optimal fast velocity is w*(y) = sqrt(c^2 + 2 sigma^2 theta) with
    theta in (-min c^2/(2 sigma^2), infinity) chosen so that the sojourn
    constraint integral beta/w* dy = 1 holds; theta is positive exactly
    when |beta| exceeds the zero-control velocity.  beta = 0 is rejected:
    the variational problem is restricted to controls with nonzero
    velocity everywhere.
    """
    if model.d != 1:
        raise DimensionError("the Regime-3 local rate is implemented for d = 1")
    beta_f = float(np.asarray(beta).ravel()[0])
    if beta_f == 0.0:
        raise ValueError("Regime-3 local rate is undefined at beta = 0 "
                         "(only nonzero-velocity controls are admissible)")
    y = (np.arange(n) / n)[:, None]
    X = np.broadcast_to(np.asarray(x, dtype=float).reshape(1), (n, 1))
    coeff = model.coefficients
    c = coeff.c_at(X, y)[:, 0]
    sig = coeff.sigma_at(X, y)[:, 0, 0]
    reflect = beta_f < 0
    if reflect:
        beta_w, c_w = -beta_f, -c
    else:
        beta_w, c_w = beta_f, c
    s2 = sig ** 2

    theta_min = -float(np.min(c_w ** 2 / (2 * s2)))

    def wstar(theta):
        return np.sqrt(np.maximum(c_w ** 2 + 2 * s2 * theta, 0.0))

    def gfun(theta):
        w = wstar(theta)
        if np.any(w <= 0):
            return np.inf
        return float(np.mean(beta_w / w)) - 1.0

    # bracket: g is strictly decreasing; g -> +inf at theta_min, -> -1 at inf
    hi = max(1.0, abs(theta_min)) * 2.0
    for _ in range(200):
        if gfun(hi) < 0:
            break
        hi *= 2.0
    else:
        raise BracketError("Regime-3 multiplier: upper bracket not found")
    span = hi - theta_min
    lo = theta_min + 1e-12 * max(1.0, span)
    for _ in range(200):
        if gfun(lo) > 0:
            break
        lo = theta_min + (lo - theta_min) * 0.5
        if lo - theta_min < 1e-300:
            raise BracketError("Regime-3 multiplier: lower bracket not found")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if gfun(mid) > 0:
            lo = mid
        else:
            hi = mid
    theta = 0.5 * (lo + hi)
    for _ in range(8):
        w = wstar(theta)
        gval = float(np.mean(beta_w / w)) - 1.0
        gp = -beta_w * float(np.mean(s2 / w ** 3))
        if gp == 0:
            break
        tnew = theta - gval / gp
        if not (lo <= tnew <= hi):
            break
        theta = tnew
        if abs(gval) < 1e-15:
            break

    w = wstar(theta)
    v = (w - c_w) / sig
    value = 0.5 * float(np.mean(v ** 2 * beta_w / w))
    v_out = -v if reflect else v
    ygrid = y[:, 0]

    def control(yq):
        yq = np.asarray(yq, dtype=float).ravel() % 1.0
        return np.interp(yq, ygrid, v_out, period=1.0)

    return LocalRateResult(regime=3, x=np.atleast_1d(np.asarray(x, dtype=float)),
                           beta=np.atleast_1d(beta_f), value=value,
                           dual=float(theta), control=control)


def r3_evaluator(model, n: int = 1024):
    """Scalar (x, beta) -> L3 evaluator."""

    def L(x, beta):
        xs = np.broadcast_arrays(np.asarray(x, dtype=float),
                                 np.asarray(beta, dtype=float))
        flat_x, flat_b = xs[0].ravel(), xs[1].ravel()
        out = np.array([local_rate_r3(model, xi, bi, n).value
                        for xi, bi in zip(flat_x, flat_b)])
        return out.reshape(xs[0].shape) if xs[0].shape else float(out[0])

    return L


# ---------------------------------------------------------------------------
# Pathwise action


def action(path, rate_fn) -> float:
    """Composite midpoint quadrature of L(phi, dphi/dt) over the knots.

    Velocities use forward differences on knot intervals; L is evaluated
    at interval midpoints.  Returns math.inf if any interval evaluation
    fails or is non-finite.
    """
    times = np.asarray(path.times, dtype=float)
    states = np.asarray(path.states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    dt = np.diff(times)
    mids = 0.5 * (states[1:] + states[:-1])
    vels = np.diff(states, axis=0) / dt[:, None]
    try:
        if states.shape[1] == 1:
            vals = np.asarray(rate_fn(mids[:, 0], vels[:, 0]), dtype=float)
        else:
            vals = np.array([float(rate_fn(m, v)) for m, v in zip(mids, vels)])
    except (ValueError, BracketError, SolverError):
        return math.inf
    if not np.all(np.isfinite(vals)):
        return math.inf
    return float(np.sum(vals * dt))
