"""Periodic-grid substrate: quadrature, generators, densities, eigenpairs.

Uniform grids on the unit torus in one or two dimensions carry all PDE
work: rectangle-rule quadrature (spectrally accurate for smooth periodic
integrands), discrete generators of the fast process, stationary
densities of elliptic generators, and principal eigenpairs of twisted
operators.

Two discretization schemes are available for the derivative matrices:

``fd2``
    second-order central differences with periodic wrap.  Differentiation
    residuals shrink by ~4x per grid doubling.
``spectral``
    Fourier collocation differentiation matrices (dense).  For smooth
    coefficients the error is limited by roundoff already on coarse
    grids; the solver-facing routines default to this scheme because the
    homogenization tolerances downstream are far below what a
    second-order scheme delivers on practical grids.

Solvers are pure; a single operator is read-only after assembly and
multiple solves may run concurrently on distinct operators.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionError, SolverError
from .model import classify_regime

SCHEMES = ("fd2", "spectral")


@dataclass(frozen=True)
class TorusGrid:
    """Uniform nodes y_j = j/n per dimension; n a power of two."""

    d: int
    n: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise DimensionError(f"torus grids support d in {{1, 2}}, got {self.d}")
        if self.n < 4 or (self.n & (self.n - 1)) != 0:
            raise ValueError(f"n must be a power of two >= 4, got {self.n}")

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def shape(self):
        return (self.n,) * self.d

    @property
    def size(self):
        return self.n ** self.d

    def nodes(self):
        return np.arange(self.n) / self.n

    def nodes_flat(self):
        """All nodes as an (n^d, d) array, first axis fastest-varying last."""
        if self.d == 1:
            return self.nodes()[:, None]
        y1, y2 = np.meshgrid(self.nodes(), self.nodes(), indexing="ij")
        return np.column_stack([y1.ravel(), y2.ravel()])


@dataclass(frozen=True)
class GridFunction:
    """Values per node; scalar fields have values.shape == grid.shape,
    vector/matrix fields append component axes."""

    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape[:self.grid.d] != self.grid.shape:
            raise DimensionError(
                f"values shape {v.shape} does not start with grid shape "
                f"{self.grid.shape}")
        if not np.isfinite(v).all():
            raise ValueError("grid function contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def is_scalar(self):
        return self.values.shape == self.grid.shape


def quadrature(f) -> float:
    """Rectangle rule h^d * sum f_j over the torus (scalar fields)."""
    if isinstance(f, GridFunction):
        if not f.is_scalar:
            raise ValueError("quadrature needs a scalar-valued grid function")
        return float(f.values.sum() * f.grid.h ** f.grid.d)
    raise TypeError("quadrature expects a GridFunction")


# ---------------------------------------------------------------------------
# Derivative matrices

_DIFF_CACHE = {}


def diff_matrices(n: int, scheme: str = "fd2"):
    """First- and second-derivative matrices on n periodic nodes.

    fd2 matrices are sparse (csr); spectral matrices are dense.  Both
    annihilate constants exactly (zero row sums).
    """
    key = (n, scheme)
    if key in _DIFF_CACHE:
        return _DIFF_CACHE[key]
    h = 1.0 / n
    if scheme == "fd2":
        e = np.ones(n)
        D1 = sp.diags([e, -e], [1, -1], shape=(n, n), format="lil") / (2 * h)
        D1[0, n - 1] = -1 / (2 * h)
        D1[n - 1, 0] = 1 / (2 * h)
        D2 = sp.diags([e, e, -2 * e], [1, -1, 0], shape=(n, n), format="lil") / h**2
        D2[0, n - 1] = 1 / h**2
        D2[n - 1, 0] = 1 / h**2
        out = (D1.tocsr(), D2.tocsr())
    elif scheme == "spectral":
        k = np.fft.rfftfreq(n, d=h)
        ik = 2j * np.pi * k
        d1 = ik.copy()
        if n % 2 == 0:
            d1[-1] = 0.0  # odd-derivative Nyquist mode
        eye = np.eye(n)
        D1 = np.fft.irfft(np.fft.rfft(eye, axis=0) * d1[:, None], n=n, axis=0)
        D2 = np.fft.irfft(np.fft.rfft(eye, axis=0) * (ik ** 2)[:, None], n=n, axis=0)
        out = (D1, D2)
    else:
        raise ValueError(f"unknown scheme {scheme!r}; use one of {SCHEMES}")
    _DIFF_CACHE[key] = out
    return out


def _as_operator_matrix(mat):
    return mat.tocsr() if sp.issparse(mat) else np.asarray(mat)


@dataclass(frozen=True)
class DiscreteOperator:
    """A matrix acting on flattened grid functions, plus its grid."""

    matrix: object
    grid: TorusGrid
    scheme: str

    def apply(self, values):
        v = np.asarray(values, dtype=float).ravel()
        out = self.matrix @ v
        return np.asarray(out).reshape(self.grid.shape)

    @property
    def size(self):
        return self.grid.size


def build_operator_1d(grid: TorusGrid, drift, diffusion=None, potential=None,
                      scheme: str = "fd2") -> DiscreteOperator:
    """drift*d/dy + diffusion*d2/dy2 + potential on a 1-D grid."""
    if grid.d != 1:
        raise DimensionError("build_operator_1d needs a 1-D grid")
    D1, D2 = diff_matrices(grid.n, scheme)
    drift = np.broadcast_to(np.asarray(drift, dtype=float), (grid.n,))
    if scheme == "fd2":
        A = sp.diags(drift) @ D1
        if diffusion is not None:
            diffusion = np.broadcast_to(np.asarray(diffusion, dtype=float), (grid.n,))
            A = A + sp.diags(diffusion) @ D2
        if potential is not None:
            potential = np.broadcast_to(np.asarray(potential, dtype=float), (grid.n,))
            A = A + sp.diags(potential)
        return DiscreteOperator(A.tocsr(), grid, scheme)
    A = drift[:, None] * D1
    if diffusion is not None:
        diffusion = np.broadcast_to(np.asarray(diffusion, dtype=float), (grid.n,))
        A = A + diffusion[:, None] * D2
    if potential is not None:
        potential = np.broadcast_to(np.asarray(potential, dtype=float), (grid.n,))
        A = A + np.diag(potential)
    return DiscreteOperator(A, grid, scheme)


def assemble_generator(regime, model, x, z=None, grid: TorusGrid = None,
                       scheme: str = "fd2") -> DiscreteOperator:
    """Discretize the fast-process generator of the given regime at x.

    Regime 1: b . grad_y + (1/2) sigma sigma^T : grad_y grad_y
    Regime 2: [gamma b + c + sigma z] . grad_y + (gamma/2) sigma sigma^T : ...
    Regime 3: [c + sigma z] . grad_y                       (first order)

    z may be None (zero control), a constant vector, or per-node values of
    shape grid.shape + (d,).  Row sums of the result vanish on constants
    to machine precision.
    """
    if grid is None:
        raise ValueError("grid is required")
    coeff = model.coefficients
    d = coeff.d
    if grid.d != d:
        raise DimensionError(f"grid dimension {grid.d} != model dimension {d}")
    x = np.asarray(x, dtype=float).reshape(d)
    ynodes = grid.nodes_flat()
    X = np.broadcast_to(x, (grid.size, d))

    if z is None:
        zv = np.zeros((grid.size, d))
    else:
        zv = np.asarray(z, dtype=float)
        if zv.ndim <= 1:
            zv = np.broadcast_to(zv.reshape(-1), (grid.size, d))
        else:
            zv = zv.reshape(grid.size, d)

    c = coeff.c_at(X, ynodes)
    sig = coeff.sigma_at(X, ynodes)
    sz = np.einsum("kij,kj->ki", sig, zv)

    if regime == 1:
        drift = coeff.b_at(X, ynodes)
        diff = 0.5 * np.einsum("kij,klj->kil", sig, sig)
    elif regime == 2:
        _, gamma = classify_regime(model)
        if gamma is None:
            raise ValueError("model is not in Regime 2 (a != 1)")
        drift = gamma * coeff.b_at(X, ynodes) + c + sz
        diff = 0.5 * gamma * np.einsum("kij,klj->kil", sig, sig)
    elif regime == 3:
        drift = c + sz
        diff = None
    else:
        raise ValueError(f"unknown regime {regime!r}")

    if d == 1:
        return build_operator_1d(grid, drift[:, 0],
                                 None if diff is None else diff[:, 0, 0],
                                 scheme=scheme)
    return _assemble_2d(grid, drift, diff, scheme)


def _assemble_2d(grid, drift, diff, scheme):
    n = grid.n
    D1, D2 = diff_matrices(n, scheme)
    if scheme == "spectral":
        D1 = sp.csr_matrix(D1)
        D2 = sp.csr_matrix(D2)
    eye = sp.identity(n, format="csr")
    K1 = (sp.kron(D1, eye, format="csr"), sp.kron(eye, D1, format="csr"))
    K2 = (sp.kron(D2, eye, format="csr"), sp.kron(eye, D2, format="csr"))
    A = sp.diags(drift[:, 0]) @ K1[0] + sp.diags(drift[:, 1]) @ K1[1]
    if diff is not None:
        A = A + sp.diags(diff[:, 0, 0]) @ K2[0] + sp.diags(diff[:, 1, 1]) @ K2[1]
        offdiag = diff[:, 0, 1] + diff[:, 1, 0]
        if np.max(np.abs(offdiag)) > 0:
            if scheme == "spectral":
                raise SolverError(
                    "spectral 2-D assembly supports diagonal diffusion only; "
                    "use scheme='fd2' for mixed derivatives")
            K11 = sp.kron(D1, D1, format="csr")
            A = A + sp.diags(offdiag) @ K11
    return DiscreteOperator(A.tocsr(), grid, scheme)


# ---------------------------------------------------------------------------
# Linear algebra helpers


def _make_solver(M):
    if sp.issparse(M):
        lu = spla.splu(M.tocsc())
        return lu.solve
    lu = sla.lu_factor(M)
    return lambda rhs: sla.lu_solve(lu, rhs)


def _identity_like(A, n):
    return sp.identity(n, format="csr") if sp.issparse(A) else np.eye(n)


def _inf_norm(A):
    if sp.issparse(A):
        return float(np.max(np.abs(A).sum(axis=1)))
    return float(np.max(np.sum(np.abs(A), axis=1)))


def stationary_density(op: DiscreteOperator, tol: float = 1e-10,
                       maxit: int = 12) -> GridFunction:
    """Invariant density of an elliptic generator: L* m = 0, mass 1, m > 0.

    Computed as the null vector of the transposed matrix by shifted
    inverse iteration started from the all-ones vector (deterministic).
    The residual ||L* m||_inf is accepted below tol times the attainable
    backward-error scale max(||m||_inf, || |L*| |m| ||_inf); for an
    O(1)-normalized operator this is the plain relative-to-||m|| test.
    """
    A = op.matrix
    n = op.size
    AT = A.T.tocsr() if sp.issparse(A) else A.T.copy()
    absAT = abs(AT) if sp.issparse(AT) else np.abs(AT)
    scale = _inf_norm(AT)
    if scale == 0.0:
        raise SolverError("zero operator has no normalizable density")
    shift = 1e-9 * scale
    solve = _make_solver(_identity_like(AT, n) * shift - AT)
    v = np.ones(n)
    for _ in range(maxit):
        v = solve(v)
        v = v / np.max(np.abs(v))
        res = np.max(np.abs(AT @ v))
        floor = np.max(absAT @ np.abs(v)) * 64 * np.finfo(float).eps
        if res <= tol * max(np.max(np.abs(v)), floor / tol):
            break
    else:
        raise SolverError(
            f"stationary density did not converge: residual {res:.3e}")
    if v.sum() < 0:
        v = -v
    mass = v.sum() * op.grid.h ** op.grid.d
    m = v / mass
    if m.min() <= 0.0:
        raise SolverError(
            f"stationary density has non-positive mass (min {m.min():.3e}); "
            "the grid is too coarse for these coefficients")
    return GridFunction(op.grid, m.reshape(op.grid.shape))


def _dense_principal(A, imag_tol=1e-8):
    w, V = np.linalg.eig(np.asarray(A))
    k = int(np.argmax(w.real))
    lam = w[k]
    scale = 1.0 + abs(lam)
    if abs(lam.imag) > imag_tol * scale:
        raise SolverError(
            f"dominant eigenvalue is complex ({lam:.6g}); "
            "discretization too coarse")
    phi = V[:, k]
    pivot = phi[np.argmax(np.abs(phi))]
    phi = phi / pivot
    if np.max(np.abs(phi.imag)) > 1e-8:
        raise SolverError("dominant eigenvector is complex; "
                          "discretization too coarse")
    return float(lam.real), phi.real


def principal_eigenpair(op: DiscreteOperator, shift_hint: float = None,
                        tol: float = 3e-13, maxit: int = 120,
                        positivity_tol: float = 0.0):
    """Eigenvalue of maximal real part with its positive eigenvector.

    Shifted inverse iteration from the all-ones vector with Rayleigh
    updates; falls back to a dense eigendecomposition if the iteration
    stalls.  The eigenvector is normalized to max = 1 and must be
    strictly positive.  positivity_tol > 0 tolerates negative entries of
    relative size up to that tolerance (clamping them to the tolerance
    floor): eigenfunctions with genuine exponential dynamic range
    underflow double precision even on resolved grids.  Residual
    ||A phi - lam phi||_inf <= tol * ||A||_inf.  Returns (lam, GridFunction).
    """
    A = op.matrix
    n = op.size
    normA = _inf_norm(A)
    ones = np.ones(n)
    rowsum = np.asarray(A @ ones).ravel()
    if shift_hint is not None:
        sigma = float(shift_hint)
    else:
        spread = float(np.ptp(rowsum))
        sigma = float(np.max(rowsum)) + 0.05 * spread + 1e-8 * (normA + 1.0)
    v = ones.copy()
    lam = float(np.max(rowsum))
    converged = False
    for outer in range(6):
        try:
            solve = _make_solver(_identity_like(A, n) * sigma - A)
        except RuntimeError:
            sigma += max(1e-8 * (normA + 1.0), abs(sigma) * 1e-8)
            continue
        for _ in range(maxit // 6 + 2):
            w = solve(v)
            w = w / w[np.argmax(np.abs(w))]
            lam = float(w @ (A @ w) / (w @ w))
            res = np.max(np.abs(A @ w - lam * w))
            v = w
            if res <= tol * normA:
                converged = True
                break
        if converged:
            break
        sigma = lam + max(10 * res, 1e-10 * (normA + 1.0))
    if not converged:
        if n > 4096:
            raise SolverError(
                f"principal eigenpair did not converge (residual {res:.3e})")
        lam, v = _dense_principal(A)
    phi = v / v[np.argmax(np.abs(v))]
    if phi.min() <= 0.0:
        if positivity_tol > 0.0 and phi.min() >= -positivity_tol * phi.max():
            phi = np.maximum(phi, positivity_tol * phi.max())
        else:
            raise SolverError(
                f"principal eigenvector is not strictly positive "
                f"(min {phi.min():.3e}); discretization too coarse")
    phi = phi / phi.max()
    return lam, GridFunction(op.grid, phi.reshape(op.grid.shape))


def solve_with_null_constraint(op: DiscreteOperator, rhs, weight,
                               null_vector=None):
    """Solve A u = rhs subject to sum(u * weight) * h^d = 0.

    The generator A kills constants, so the plain system is singular; the
    bordered (saddle) system pins the weighted mean instead of a node.
    null_vector spans the complement of range(A) (defaults to the
    stationary density of A); the returned multiplier absorbs any
    component of rhs outside range(A).
    Returns (u, multiplier).
    """
    A = op.matrix
    n = op.size
    rhs = np.asarray(rhs, dtype=float).ravel()
    weight = np.asarray(weight, dtype=float).ravel() * op.grid.h ** op.grid.d
    if null_vector is None:
        null_vector = stationary_density(op).values.ravel()
    if sp.issparse(A):
        top = sp.hstack([A, sp.csc_matrix(null_vector[:, None])])
        bottom = sp.hstack([sp.csr_matrix(weight[None, :]), sp.csc_matrix((1, 1))])
        M = sp.vstack([top, bottom]).tocsc()
        sol = spla.splu(M).solve(np.concatenate([rhs, [0.0]]))
    else:
        M = np.zeros((n + 1, n + 1))
        M[:n, :n] = A
        M[:n, n] = null_vector
        M[n, :n] = weight
        sol = np.linalg.solve(M, np.concatenate([rhs, [0.0]]))
    return sol[:n], float(sol[n])
