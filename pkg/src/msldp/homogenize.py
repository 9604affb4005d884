"""Regime-1 homogenization: invariant measure, cell solution, r(x), q(x).

For each frozen slow state x the fast process has generator
L = b . grad_y + (1/2) sigma sigma^T : grad_y grad_y with invariant
density mu(.|x).  Under the centering condition (the mu-average of b
vanishes) the cell problem

    L chi_l = -b_l,   integral of chi_l against mu = 0,

has a unique solution, and the effective drift and diffusivity are

    r(x) = integral (I + dchi/dy) c dmu,
    q(x) = integral (I + dchi/dy) sigma sigma^T (I + dchi/dy)^T dmu.

x is treated as a parameter: the table type memoizes per-x solutions on
a user-declared lattice and interpolates linearly between lattice
points.  For a separable gradient fast drift everything collapses to
1-D quadratures; see :func:`separable_effective_diffusivity`.
"""

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import expr as ex
from . import torus
from .errors import DimensionError, SolverError
from .torus import GridFunction, TorusGrid

CENTERING_RTOL = 1e-7


def _default_grid(d):
    return TorusGrid(d, 512 if d == 1 else 64)


def _generator(model, x, grid, scheme):
    from .torus import assemble_generator
    return assemble_generator(1, model, x, None, grid, scheme)


def _b_on_grid(model, x, grid):
    ynodes = grid.nodes_flat()
    X = np.broadcast_to(np.asarray(x, dtype=float).reshape(model.d),
                        (grid.size, model.d))
    return model.coefficients.b_at(X, ynodes)


def check_centering(model, x, grid: TorusGrid = None, scheme: str = "spectral"):
    """Residual norm of the centering condition and a pass/fail flag.

    The residual is || integral b(x, y) mu(dy|x) ||_2; it passes when
    below 1e-7 * (1 + max |b|).
    """
    grid = grid or _default_grid(model.d)
    op = _generator(model, x, grid, scheme)
    mu = torus.stationary_density(op)
    bvals = _b_on_grid(model, x, grid)
    avg = (bvals * mu.values.ravel()[:, None]).sum(axis=0) * grid.h ** grid.d
    residual = float(np.linalg.norm(avg))
    bound = CENTERING_RTOL * (1.0 + float(np.max(np.abs(bvals))))
    return residual, residual <= bound


@dataclass(frozen=True)
class HomogenizedPoint:
    """Cell data at one slow state: density, chi, dchi/dy, r, q."""

    x: np.ndarray
    grid: TorusGrid
    mu: GridFunction
    chi: GridFunction        # values: grid.shape + (d,)
    dchi: GridFunction       # values: grid.shape + (d, d), entry (l, k) = d chi_l / d y_k
    r: np.ndarray
    q: np.ndarray
    centering_residual: float
    sigma_grid: np.ndarray   # sigma(x, y_j), shape (grid.size, d, d)

    def transport(self):
        """(I + dchi/dy) at every node, shape grid.shape + (d, d)."""
        d = self.grid.d
        return np.eye(d) + self.dchi.values


def solve_cell_problem(model, x, grid: TorusGrid = None,
                       scheme: str = "spectral"):
    """Solve L chi_l = -b_l with the mu-weighted mean pinned to zero.

    Returns (chi, dchi, mu) as grid functions.  Raises SolverError if the
    centering condition fails (the bordered system would then absorb a
    spurious constant forcing).
    """
    grid = grid or _default_grid(model.d)
    d = model.d
    op = _generator(model, x, grid, scheme)
    mu = torus.stationary_density(op)
    bvals = _b_on_grid(model, x, grid)

    avg = (bvals * mu.values.ravel()[:, None]).sum(axis=0) * grid.h ** grid.d
    residual = float(np.linalg.norm(avg))
    if residual > CENTERING_RTOL * (1.0 + float(np.max(np.abs(bvals)))):
        raise SolverError(
            f"centering condition fails at x={np.asarray(x)}: "
            f"|integral b dmu| = {residual:.3e}")

    mvec = mu.values.ravel()
    chi = np.empty((grid.size, d))
    for ell in range(d):
        u, _ = torus.solve_with_null_constraint(op, -bvals[:, ell], mvec,
                                                null_vector=mvec)
        chi[:, ell] = u

    dchi = _differentiate_grid(chi, grid, scheme)
    chi_gf = GridFunction(grid, chi.reshape(grid.shape + (d,)))
    dchi_gf = GridFunction(grid, dchi.reshape(grid.shape + (d, d)))
    return chi_gf, dchi_gf, mu, residual


def _differentiate_grid(chi_flat, grid, scheme):
    """d chi_l / d y_k for all components; chi_flat is (size, d)."""
    d = grid.d
    D1, _ = torus.diff_matrices(grid.n, scheme)
    out = np.empty((grid.size, d, d))
    if d == 1:
        out[:, 0, 0] = D1 @ chi_flat[:, 0]
        return out
    D1s = sp.csr_matrix(D1) if not sp.issparse(D1) else D1
    eye = sp.identity(grid.n, format="csr")
    K = (sp.kron(D1s, eye, format="csr"), sp.kron(eye, D1s, format="csr"))
    for ell in range(d):
        for k in range(d):
            out[:, ell, k] = K[k] @ chi_flat[:, ell]
    return out


def effective_coefficients(model, x, grid: TorusGrid = None,
                           scheme: str = "spectral"):
    """Quadrature-evaluated (r(x), q(x)); q symmetrized and SPD-verified."""
    point = solve_at(model, x, grid, scheme)
    return point.r, point.q


def solve_at(model, x, grid: TorusGrid = None,
             scheme: str = "spectral") -> HomogenizedPoint:
    """Full homogenization data at one x."""
    grid = grid or _default_grid(model.d)
    d = model.d
    chi, dchi, mu, residual = solve_cell_problem(model, x, grid, scheme)
    ynodes = grid.nodes_flat()
    X = np.broadcast_to(np.asarray(x, dtype=float).reshape(d), (grid.size, d))
    c = model.coefficients.c_at(X, ynodes)
    sig = model.coefficients.sigma_at(X, ynodes)
    M = np.eye(d) + dchi.values.reshape(grid.size, d, d)
    w = mu.values.ravel() * grid.h ** grid.d

    r = np.einsum("kij,kj,k->i", M, c, w)
    Msig = np.einsum("kij,kjl->kil", M, sig)
    q = np.einsum("kil,kjl,k->ij", Msig, Msig, w)
    q = 0.5 * (q + q.T)
    eig = np.linalg.eigvalsh(q)
    if eig[0] <= 0.0:
        raise SolverError(
            f"effective diffusivity is not positive definite at x="
            f"{np.asarray(x)} (min eigenvalue {eig[0]:.3e}); grid too coarse")
    return HomogenizedPoint(x=np.asarray(x, dtype=float).reshape(d), grid=grid,
                            mu=mu, chi=chi, dchi=dchi, r=r, q=q,
                            centering_residual=residual, sigma_grid=sig)


# ---------------------------------------------------------------------------
# Lattice table with linear interpolation


class HomogenizedModel:
    """Per-x cell solutions memoized on an x-lattice (d = 1 interpolation).

    Lattice nodes are solved lazily on first use; concurrent insert-or-get
    on the memo dict is safe (last writer wins on identical keys).  Between
    nodes r, q and dchi are interpolated linearly; queries outside the
    lattice hull raise.
    """

    def __init__(self, model, xs, grid: TorusGrid = None,
                 scheme: str = "spectral"):
        self.model = model
        self.grid = grid or _default_grid(model.d)
        self.scheme = scheme
        xs = np.asarray(xs, dtype=float)
        if model.d == 1:
            xs = np.unique(xs.ravel())
            if xs.size < 1:
                raise ValueError("empty x-lattice")
            self.xs = xs
        else:
            self.xs = xs.reshape(-1, model.d)
        self._points = {}

    @property
    def d(self):
        return self.model.d

    def point(self, i) -> HomogenizedPoint:
        p = self._points.get(i)
        if p is None:
            x = self.xs[i] if self.d > 1 else np.array([self.xs[i]])
            p = solve_at(self.model, x, self.grid, self.scheme)
            self._points[i] = p
        return p

    def tabulate(self):
        for i in range(len(self.xs)):
            self.point(i)
        return self

    def _locate(self, x):
        """Interval indices and weights for piecewise-linear interpolation."""
        if self.d != 1:
            raise DimensionError("lattice interpolation is 1-D only; "
                                 "query lattice nodes directly for d = 2")
        x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        lo, hi = self.xs[0], self.xs[-1]
        if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
            bad = x[(x < lo - 1e-12) | (x > hi + 1e-12)][0]
            raise ValueError(
                f"x = {bad} outside homogenization lattice hull [{lo}, {hi}]")
        if self.xs.size == 1:
            return np.zeros(x.shape, dtype=int), np.zeros(x.shape)
        idx = np.clip(np.searchsorted(self.xs, x, side="right") - 1,
                      0, self.xs.size - 2)
        t = (x - self.xs[idx]) / (self.xs[idx + 1] - self.xs[idx])
        return idx, np.clip(t, 0.0, 1.0)

    def _stack(self, attr):
        self.tabulate()
        return np.stack([getattr(self.point(i), attr) for i in range(len(self.xs))])

    def r_at(self, x):
        """Effective drift, shape (d,) for scalar x or batch + (d,)."""
        idx, t = self._locate(x)
        table = self._stack("r")
        if self.xs.size == 1:
            out = np.broadcast_to(table[0], idx.shape + (1,)).copy()
        else:
            out = (1 - t)[..., None] * table[idx] + t[..., None] * table[idx + 1]
        return out[0] if np.isscalar(x) or np.asarray(x).ndim == 0 else out

    def q_at(self, x):
        idx, t = self._locate(x)
        table = self._stack("q")
        if self.xs.size == 1:
            out = np.broadcast_to(table[0], idx.shape + (1, 1)).copy()
        else:
            out = ((1 - t)[..., None, None] * table[idx]
                   + t[..., None, None] * table[idx + 1])
        return out[0] if np.isscalar(x) or np.asarray(x).ndim == 0 else out

    def dchi_table(self):
        """Stacked dchi values, shape (len(xs),) + grid.shape + (d, d)."""
        self.tabulate()
        return np.stack([self.point(i).dchi.values for i in range(len(self.xs))])


def export_csv(hom: HomogenizedModel, path):
    """Write (x, r(x), q(x)) rows at the lattice nodes, 17 significant digits."""
    hom.tabulate()
    d = hom.d
    header = ([f"x_{i+1}" for i in range(d)]
              + [f"r_{i+1}" for i in range(d)]
              + [f"q_{i+1}{j+1}" for i in range(d) for j in range(d)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(hom.xs)):
            p = hom.point(i)
            row = list(p.x) + list(p.r) + list(p.q.ravel())
            w.writerow([f"{v:.17g}" for v in row])


# ---------------------------------------------------------------------------
# Separable Langevin closed form


def separable_effective_diffusivity(q_exprs, D, v_expr=None, n: int = 2048):
    """Closed-form homogenization for a separable gradient fast drift.

    With fast potential Q(y) = sum_i Q_i(y_i) and noise sqrt(2 D):

        Theta = diag(1 / (Z_i * Zhat_i)),  q = 2 D Theta,
        r(x) = -Theta grad V(x),

    where Z_i and Zhat_i are the unit-period integrals of exp(-Q_i/D) and
    exp(+Q_i/D).  Each Q_i is an expression in its own coordinate (name
    it y or y_i).  Returns (Theta, q, r_fn); r_fn is None unless the
    large-scale potential expression V is supplied.
    """
    if D <= 0:
        raise ValueError(f"D must be positive, got {D}")
    d = len(q_exprs)
    y = np.arange(n) / n
    diag = np.empty(d)
    for i, q_expr in enumerate(q_exprs):
        node = ex.parse(q_expr) if isinstance(q_expr, str) else q_expr
        names = ex.free_names(node)
        if not names:
            vals = np.full(n, ex.evaluate(node, {}))
        elif len(names) == 1:
            fn = ex.compile_fn(node, tuple(names))
            vals = np.broadcast_to(fn(y), (n,))
        else:
            raise ValueError(
                f"Q_{i+1} must be univariate, found identifiers {sorted(names)}")
        Z = np.mean(np.exp(-vals / D))
        Zhat = np.mean(np.exp(vals / D))
        diag[i] = 1.0 / (Z * Zhat)
    theta = np.diag(diag)
    qmat = 2.0 * D * theta

    r_fn = None
    if v_expr is not None:
        vnode = ex.parse(v_expr) if isinstance(v_expr, str) else v_expr
        if d == 1:
            vnode_c = ex.substitute(vnode, {"x": ex.Name("x_1")})
        else:
            vnode_c = vnode
        xs = tuple(f"x_{i+1}" for i in range(d))
        grads = [ex.compile_fn(ex.differentiate(vnode_c, name), xs) for name in xs]

        def r_fn(x):
            """-Theta grad V; scalar/(d,) input gives (d,), (k, d) gives (k, d)."""
            x = np.asarray(x, dtype=float)
            single = x.ndim == 0 or (x.ndim == 1 and d > 1)
            pts = x.reshape(-1, d)
            cols = tuple(pts[:, i] for i in range(d))
            g = np.stack([np.broadcast_to(gfn(*cols), cols[0].shape)
                          for gfn in grads], axis=-1)
            out = -g @ theta
            return out[0] if single else out

    return theta, qmat, r_fn
