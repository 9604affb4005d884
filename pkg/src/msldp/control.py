"""Near-optimal feedback controls for importance sampling.

Regime 1 tilts the dynamics toward a target velocity schedule psi-dot:

    ubar(t, x, y) = sigma^T (I + dchi/dy)^T q(x)^{-1} (psidot_t - r(x)),

whose fast-average cost equals the local rate at (x, psidot_t) by the
defining property of the infimizer.  Regime 2 reads the control off the
stored Bellman gradients, ubar = -sigma^T grad(Wbar).  Fields evaluate
as (t, x, y) -> control and are immutable, so many simulation workers
may share one field; binding a field at a given (eps, delta) yields the
partial-feedback process u(t, X) = field(t, X, wrap(X/delta)).
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .homogenize import HomogenizedModel, HomogenizedPoint
from .ratefn import local_rate_r2
from .torus import TorusGrid


@dataclass(frozen=True)
class ControlField:
    """Feedback control ubar(t, x, y), periodic in y."""

    regime: int
    fn: object                  # callable (t, x(B,d), y(B,d)) -> (B,d)
    meta: dict

    def __call__(self, t, x, y):
        return self.fn(t, x, y)

    def sample_bound(self, t_grid, x_grid, n_y: int = 64):
        """Sampled sup-norm of the field over a (t, x, y) lattice."""
        y = (np.arange(n_y) / n_y)[:, None]
        best = 0.0
        for t in np.atleast_1d(t_grid):
            for xv in np.atleast_1d(x_grid):
                X = np.full((n_y, 1), float(xv))
                vals = self.fn(float(t), X, y)
                best = max(best, float(np.max(np.abs(vals))))
        return best


def regime1_control(hom, schedule) -> ControlField:
    """Field sigma^T (I + dchi)^T q^{-1} (psidot - r) from homogenized data.

    hom is a HomogenizedModel (d = 1; r, q and dchi interpolate linearly
    in x between lattice nodes, and queries outside the lattice hull
    raise) or a single HomogenizedPoint (frozen x, any d).  schedule is a
    callable t -> psidot.
    """
    if isinstance(hom, HomogenizedPoint):
        point = hom
        d = point.x.size
        M = point.transport().reshape(point.grid.size, d, d)
        smt = np.swapaxes(point.sigma_grid, -1, -2) @ np.swapaxes(M, -1, -2)
        qinv = np.linalg.inv(point.q)
        grid = point.grid

        def fn(t, x, y):
            y = np.asarray(y, dtype=float).reshape(-1, d) % 1.0
            idx = np.round(y * grid.n).astype(int) % grid.n
            flat = idx[:, 0] if d == 1 else idx[:, 0] * grid.n + idx[:, 1]
            w = qinv @ (np.asarray(schedule(t), dtype=float).reshape(d) - point.r)
            return np.einsum("kij,j->ki", smt[flat], w)

        return ControlField(regime=1, fn=fn,
                            meta={"schedule": schedule, "hom": hom})

    if not isinstance(hom, HomogenizedModel) or hom.d != 1:
        raise DimensionError("regime1_control needs a 1-D lattice table or a "
                             "HomogenizedPoint")
    hom.tabulate()
    dchi_tab = hom.dchi_table()[:, :, 0, 0]          # (L, n)
    xs = hom.xs
    n = hom.grid.n
    r_tab = np.array([hom.point(i).r[0] for i in range(len(xs))])
    q_tab = np.array([hom.point(i).q[0, 0] for i in range(len(xs))])
    sigma_fn = hom.model.coefficients._fns["sigma11"]

    def fn(t, x, y):
        x = np.asarray(x, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1) % 1.0
        if x.min() < xs[0] - 1e-12 or x.max() > xs[-1] + 1e-12:
            bad = x[(x < xs[0] - 1e-12) | (x > xs[-1] + 1e-12)][0]
            raise ValueError(f"x = {bad} outside homogenization lattice hull "
                             f"[{xs[0]}, {xs[-1]}]")
        if len(xs) == 1:
            ix = np.zeros(x.shape, dtype=int)
            tx = np.zeros(x.shape)
        else:
            ix = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
            tx = np.clip((x - xs[ix]) / (xs[ix + 1] - xs[ix]), 0.0, 1.0)
        iy = (y * n).astype(int) % n
        ty = y * n - np.floor(y * n)
        iy1 = (iy + 1) % n
        ixp = np.minimum(ix + 1, len(xs) - 1)

        def bilin(tab):
            a = (1 - ty) * tab[ix, iy] + ty * tab[ix, iy1]
            b = (1 - ty) * tab[ixp, iy] + ty * tab[ixp, iy1]
            return (1 - tx) * a + tx * b

        dchi = bilin(dchi_tab)
        r = (1 - tx) * r_tab[ix] + tx * r_tab[ixp]
        q = (1 - tx) * q_tab[ix] + tx * q_tab[ixp]
        psidot = float(np.asarray(schedule(t), dtype=float).reshape(1)[0])
        sig = sigma_fn(x, y)
        u = sig * (1.0 + dchi) * (psidot - r) / q
        return np.broadcast_to(u, x.shape)[:, None]

    return ControlField(regime=1, fn=fn, meta={"schedule": schedule, "hom": hom})


def regime1_cost_identity(point: HomogenizedPoint, psidot):
    """Quadrature cost of the Regime-1 field vs the quadratic form.

    Returns (integral |ubar|^2 dmu, (psidot-r)^T q^{-1} (psidot-r)); the
    two agree to quadrature accuracy by the infimizer property.
    """
    d = point.x.size
    psidot = np.asarray(psidot, dtype=float).reshape(d)
    M = point.transport().reshape(point.grid.size, d, d)
    smt = np.swapaxes(point.sigma_grid, -1, -2) @ np.swapaxes(M, -1, -2)
    w = np.linalg.solve(point.q, psidot - point.r)
    u = np.einsum("kij,j->ki", smt, w)
    mu = point.mu.values.ravel()
    quad = float(np.sum(np.sum(u * u, axis=1) * mu)
                 * point.grid.h ** point.grid.d)
    form = float((psidot - point.r) @ np.linalg.solve(point.q, psidot - point.r))
    return quad, form


def regime2_control(model, schedule, xs, grid: TorusGrid = None,
                    zmax: float = 12.0, scheme: str = "spectral",
                    t_breaks=None) -> ControlField:
    """Regime-2 field from stored Bellman gradients (d = 1).

    For every (t-interval, x-lattice point) the dual problem is solved at
    beta = psidot_t and the optimal control grid ubar = -sigma grad(Wbar)
    is stored; evaluation interpolates linearly in x and periodically in
    y.  Raises if the dual maximization fails at some lattice point.
    """
    if model.d != 1:
        raise DimensionError("regime2_control is implemented for d = 1")
    grid = grid or TorusGrid(1, 256)
    xs = np.unique(np.asarray(xs, dtype=float).ravel())
    if t_breaks is None:
        t_breaks = getattr(schedule, "times", None)
        if t_breaks is None:
            raise ValueError("need t_breaks for a schedule without .times")
    t_breaks = np.asarray(t_breaks, dtype=float)
    tables = np.empty((len(t_breaks), len(xs), grid.n))
    for it, t in enumerate(t_breaks):
        beta = float(np.asarray(schedule(float(t) + 1e-12)).reshape(1)[0])
        for jx, xv in enumerate(xs):
            res = local_rate_r2(model, [xv], beta, zmax=zmax, grid=grid,
                                scheme=scheme)
            tables[it, jx] = res.control(grid.nodes())
    nodes = grid.nodes()

    def fn(t, x, y):
        x = np.asarray(x, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1) % 1.0
        it = min(int(np.searchsorted(t_breaks, t, side="right") - 1),
                 len(t_breaks) - 1)
        it = max(it, 0)
        if len(xs) == 1:
            ix = np.zeros(x.shape, dtype=int)
            tx = np.zeros(x.shape)
        else:
            ix = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
            tx = np.clip((x - xs[ix]) / (xs[ix + 1] - xs[ix]), 0.0, 1.0)
        n = grid.n
        iy = (y * n).astype(int) % n
        ty = y * n - np.floor(y * n)
        iy1 = (iy + 1) % n
        tab = tables[it]
        ixp = np.minimum(ix + 1, len(xs) - 1)
        a = (1 - ty) * tab[ix, iy] + ty * tab[ix, iy1]
        b = (1 - ty) * tab[ixp, iy] + ty * tab[ixp, iy1]
        return ((1 - tx) * a + tx * b)[:, None]

    return ControlField(regime=2, fn=fn,
                        meta={"schedule": schedule, "xs": xs, "t_breaks": t_breaks})


def bind_feedback(field: ControlField, eps, delta):
    """Control process u(t, X) = field(t, X, wrap(X/delta)).

    wrap is componentwise mod 1; with delta = 1 the y-argument is the
    wrapped state itself.
    """
    delta = float(delta)

    def u(t, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return field(t, X, (X / delta) % 1.0)

    return u
