"""Multiscale diffusion model: coefficients, scaling family, regimes.

A model couples a slow state x with a fast periodic variable y = x/delta
through drift terms (eps/delta)*b(x, y) + c(x, y) and noise
sqrt(eps)*sigma(x, y).  The scaling family delta(eps) = kappa * eps^a
drives both small parameters with one knob; the exponent a alone decides
the regime:

    a > 1   Regime 1   (eps/delta -> infinity; homogenization first)
    a = 1   Regime 2   (eps/delta -> gamma = 1/kappa)
    a < 1   Regime 3   (eps/delta -> 0)

Coefficients are expression trees over x_1..x_d, y_1..y_d (aliases x, y
in one dimension), 1-periodic in every y-direction after period
normalization.  Models are immutable after construction and safe to
share across concurrent workers.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .errors import ConfigError, DimensionError, NondegeneracyError

_DERIV_RE = re.compile(r"\bd([A-Za-z_]\w*)\s*/\s*d([A-Za-z_]\w*)\b")

_RESERVED = {"dim", "period", "a", "kappa", "gamma", "x0", "nu", "sample_box"}

DEFAULT_NU = 1e-8
_PERIOD_TOL = 1e-10


def _var_names(d):
    if d == 1:
        return ("x_1",), ("y_1",)
    return tuple(f"x_{i+1}" for i in range(d)), tuple(f"y_{i+1}" for i in range(d))


def _canonical(node, d):
    """Rewrite the d = 1 aliases x, y to x_1, y_1."""
    if d == 1:
        return ex.substitute(node, {"x": ex.Name("x_1"), "y": ex.Name("y_1")})
    return node


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Drift/diffusion coefficients of one model, on the unit torus.

    b and c hold d expressions each, sigma a d x d matrix of expressions,
    all over the canonical variables x_1..x_d, y_1..y_d.  After
    construction the field also carries compiled numpy evaluators.
    """

    d: int
    b: tuple
    c: tuple
    sigma: tuple
    period: float = 1.0
    nu: float = DEFAULT_NU
    _fns: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        d = self.d
        if d < 1:
            raise DimensionError(f"dimension must be >= 1, got {d}")
        if len(self.b) != d or len(self.c) != d:
            raise DimensionError(
                f"need {d} components for b and c, got {len(self.b)} and {len(self.c)}")
        if len(self.sigma) != d or any(len(row) != d for row in self.sigma):
            raise DimensionError(f"sigma must be {d}x{d}")
        xs, ys = _var_names(d)
        args = xs + ys
        allowed = set(args)
        for label, node in self._entries():
            bad = ex.free_names(node) - allowed
            if bad:
                raise ConfigError(
                    f"unknown identifier(s) {sorted(bad)} in {label}: "
                    f"{ex.to_source(node)!r}")
        fns = {}
        for label, node in self._entries():
            fns[label] = ex.compile_fn(node, args)
        # y-derivative expressions of sigma rows are needed by generators
        # only through sigma*sigma^T, which is evaluated pointwise.
        object.__setattr__(self, "_fns", fns)

    def _entries(self):
        for i in range(self.d):
            yield f"b{i+1}", self.b[i]
            yield f"c{i+1}", self.c[i]
        for i in range(self.d):
            for j in range(self.d):
                yield f"sigma{i+1}{j+1}", self.sigma[i][j]

    # -- evaluation -------------------------------------------------------

    def _split(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.d == 1:
            xs = (x.reshape(x.shape[:-1]) if x.ndim and x.shape[-1:] == (1,) else x,)
            ys = (y.reshape(y.shape[:-1]) if y.ndim and y.shape[-1:] == (1,) else y,)
            return xs, ys, np.broadcast(xs[0], ys[0]).shape
        xs = tuple(x[..., i] for i in range(self.d))
        ys = tuple(y[..., i] for i in range(self.d))
        return xs, ys, np.broadcast(xs[0], ys[0]).shape

    def b_at(self, x, y):
        """b(x, y) with shape batch + (d,)."""
        xs, ys, shape = self._split(x, y)
        out = np.empty(shape + (self.d,))
        for i in range(self.d):
            out[..., i] = self._fns[f"b{i+1}"](*xs, *ys)
        return out

    def c_at(self, x, y):
        xs, ys, shape = self._split(x, y)
        out = np.empty(shape + (self.d,))
        for i in range(self.d):
            out[..., i] = self._fns[f"c{i+1}"](*xs, *ys)
        return out

    def sigma_at(self, x, y):
        """sigma(x, y) with shape batch + (d, d)."""
        xs, ys, shape = self._split(x, y)
        out = np.empty(shape + (self.d, self.d))
        for i in range(self.d):
            for j in range(self.d):
                out[..., i, j] = self._fns[f"sigma{i+1}{j+1}"](*xs, *ys)
        return out

    def diffusion_at(self, x, y):
        """a(x, y) = sigma sigma^T with shape batch + (d, d)."""
        s = self.sigma_at(x, y)
        return s @ np.swapaxes(s, -1, -2)

    def is_constant_sigma(self):
        return all(not ex.free_names(self.sigma[i][j])
                   for i in range(self.d) for j in range(self.d))

    def depends_on_x(self):
        xs, _ = _var_names(self.d)
        names = set()
        for _, node in self._entries():
            names |= ex.free_names(node)
        return bool(names & set(xs))


@dataclass(frozen=True, eq=False)
class MultiscaleModel:
    """A coefficient field plus the scaling family delta = kappa * eps^a."""

    coefficients: CoefficientField
    a: float
    kappa: float
    x0: np.ndarray
    gamma: float | None = None

    def __post_init__(self):
        if self.a <= 0 or self.kappa <= 0:
            raise ConfigError(f"scaling family needs a > 0 and kappa > 0, "
                              f"got a={self.a}, kappa={self.kappa}")
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.coefficients.d,):
            raise DimensionError(
                f"x0 has shape {x0.shape}, expected ({self.coefficients.d},)")
        object.__setattr__(self, "x0", x0)
        if self.a == 1.0:
            g = 1.0 / self.kappa
            if self.gamma is not None and abs(self.gamma - g) > 1e-12 * g:
                raise ConfigError(
                    f"gamma={self.gamma} inconsistent with kappa={self.kappa} "
                    f"(Regime 2 requires gamma = 1/kappa = {g})")
            object.__setattr__(self, "gamma", g)
        else:
            object.__setattr__(self, "gamma", None)

    @property
    def d(self):
        return self.coefficients.d

    def delta(self, eps):
        return self.kappa * eps ** self.a

    @property
    def regime(self):
        return classify_regime(self)[0]


def classify_regime(model: MultiscaleModel):
    """Regime tag from the scaling exponent; total and deterministic.

    Returns (1, None), (2, gamma) or (3, None).
    """
    if model.a > 1.0:
        return 1, None
    if model.a == 1.0:
        return 2, 1.0 / model.kappa
    return 3, None


# ---------------------------------------------------------------------------
# Construction from a structured config (the [model] section as a dict)


def _expand_derivatives(source, env):
    """Rewrite dNAME/dVAR into the derivative of a defined symbol.

    Only applies when NAME is a defined symbol; otherwise the text is left
    alone (so a genuine division of identifiers still parses).
    """
    pieces = {}

    def repl(m):
        name, var = m.group(1), m.group(2)
        if name not in env:
            return m.group(0)
        key = f"_deriv{len(pieces)}_"
        while key in env:
            key += "x"
        pieces[key] = ex.differentiate(env[name], var)
        return key

    return _DERIV_RE.sub(repl, source), pieces


def _parse_entry(raw, env, label):
    """Parse one config value into an expression with definitions inlined."""
    if isinstance(raw, (int, float)):
        return ex.Num(float(raw))
    source = str(raw).strip()
    if source.startswith('"') and source.endswith('"') and len(source) >= 2:
        source = source[1:-1]
    expanded, pieces = _expand_derivatives(source, env)
    try:
        node = ex.parse(expanded)
    except ex.ParseError as e:
        raise ConfigError(f"in {label}: {e}") from e
    mapping = dict(env)
    for key, deriv in pieces.items():
        # placeholder names bypass the parser's double-underscore guard
        node = _subst_placeholder(node, key, deriv)
    return ex.substitute(node, mapping)


def _subst_placeholder(node, key, deriv):
    return ex.substitute(node, {key: deriv})


def _parse_vector(value, d, label):
    parts = [p for p in str(value).replace(" ", "").split(",") if p]
    if len(parts) == 1 and d > 1:
        parts = parts * d
    if len(parts) != d:
        raise ConfigError(f"{label} needs {d} comma-separated values, got {value!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError:
        raise ConfigError(f"{label}: cannot parse {value!r} as numbers") from None


def build_model(spec: dict) -> MultiscaleModel:
    """Build and validate a model from a structured config mapping.

    Recognized keys: dim, b/c/sigma (d = 1) or b1..bd, c1..cd,
    sigma11..sigmadd, period, a, kappa, gamma, x0, nu, sample_box.  Any
    other key defines a named constant or auxiliary expression, usable in
    later entries; dNAME/dVAR references the exact derivative of a
    defined symbol.
    """
    spec = dict(spec)
    try:
        d = int(spec.pop("dim", 1))
    except (TypeError, ValueError):
        raise ConfigError(f"dim must be an integer, got {spec.get('dim')!r}") from None

    coeff_keys = {"b", "c", "sigma"}
    for i in range(d):
        coeff_keys.add(f"b{i+1}")
        coeff_keys.add(f"c{i+1}")
        for j in range(d):
            coeff_keys.add(f"sigma{i+1}{j+1}")

    env = {}
    coeff_raw = {}
    scalars = {}
    for key, value in spec.items():
        if key in coeff_keys:
            coeff_raw[key] = value
        elif key in _RESERVED:
            scalars[key] = value
        else:
            env[key] = _parse_entry(value, env, f"definition {key}")

    def take(kind, i):
        if d == 1 and kind in coeff_raw:
            return coeff_raw[kind]
        key = f"{kind}{i+1}"
        if key not in coeff_raw:
            raise ConfigError(f"missing coefficient {key!r} (dim = {d})")
        return coeff_raw[key]

    def take_sigma(i, j):
        if d == 1 and "sigma" in coeff_raw:
            return coeff_raw["sigma"]
        key = f"sigma{i+1}{j+1}"
        if key not in coeff_raw:
            raise ConfigError(f"missing coefficient {key!r} (dim = {d})")
        return coeff_raw[key]

    b = [_canonical(_parse_entry(take("b", i), env, f"b{i+1}"), d) for i in range(d)]
    c = [_canonical(_parse_entry(take("c", i), env, f"c{i+1}"), d) for i in range(d)]
    sigma = [[_canonical(_parse_entry(take_sigma(i, j), env, f"sigma{i+1}{j+1}"), d)
              for j in range(d)] for i in range(d)]

    period = scalars.get("period", 1.0)
    if isinstance(period, str) and "," in period:
        vals = _parse_vector(period, d, "period")
        if np.ptp(vals) > 0:
            raise ConfigError(
                "per-direction periods must be equal (one fast scale delta)")
        period = float(vals[0])
    period = float(period)
    if period <= 0:
        raise ConfigError(f"period must be positive, got {period}")

    a = float(scalars.get("a", 2.0))
    kappa = float(scalars.get("kappa", 1.0))
    if "gamma" in scalars:
        g = float(scalars["gamma"])
        if a != 1.0:
            raise ConfigError("gamma is only meaningful for a = 1 (Regime 2)")
        if g <= 0:
            raise ConfigError(f"gamma must be positive, got {g}")
        if "kappa" in scalars and abs(kappa - 1.0 / g) > 1e-12 / g:
            raise ConfigError(f"gamma={g} and kappa={kappa} disagree (gamma = 1/kappa)")
        kappa = 1.0 / g

    if period != 1.0:
        # Rescale to the unit torus: y <- y/L is realized by substituting
        # L*y into every coefficient; b picks up a factor L and the fast
        # scale becomes delta_tilde = L*delta, i.e. kappa <- L*kappa.
        L = period
        _, ys = _var_names(d)
        mapping = {name: ex.Mul(ex.Num(L), ex.Name(name)) for name in ys}
        b = [ex.Mul(ex.Num(L), ex.substitute(e, mapping)) for e in b]
        c = [ex.substitute(e, mapping) for e in c]
        sigma = [[ex.substitute(e, mapping) for e in row] for row in sigma]
        kappa = L * kappa

    nu = float(scalars.get("nu", DEFAULT_NU))
    x0 = scalars.get("x0", 0.0)
    x0 = _parse_vector(x0, d, "x0") if isinstance(x0, str) else np.full(d, float(x0))

    box = scalars.get("sample_box", "-2,2")
    lo, hi = _parse_vector(box, 2, "sample_box")

    field_ = CoefficientField(d=d, b=tuple(b), c=tuple(c),
                              sigma=tuple(tuple(row) for row in sigma),
                              period=1.0, nu=nu)
    _validate_samples(field_, lo, hi, nu)
    return MultiscaleModel(coefficients=field_, a=a, kappa=kappa, x0=x0,
                           gamma=float(scalars["gamma"]) if "gamma" in scalars else None)


def _validate_samples(field_, lo, hi, nu):
    """Sampled invariant checks: finiteness, nondegeneracy, periodicity."""
    d = field_.d
    rng = np.random.default_rng(2024)
    nx = 5 if d == 1 else 3
    x_axis = np.linspace(lo, hi, nx)
    x_pts = (x_axis[:, None] if d == 1
             else np.array(np.meshgrid(*[x_axis] * d)).reshape(d, -1).T)
    ny = 32
    y_axis = np.arange(ny) / ny
    y_pts = (y_axis[:, None] if d == 1
             else np.array(np.meshgrid(*[y_axis] * d)).reshape(d, -1).T)

    X = np.repeat(x_pts, len(y_pts), axis=0)
    Y = np.tile(y_pts, (len(x_pts), 1))
    for arr, what in ((field_.b_at(X, Y), "b"), (field_.c_at(X, Y), "c")):
        bad = ~np.isfinite(arr)
        if bad.any():
            k = np.argwhere(bad)[0][0]
            raise ConfigError(
                f"{what} is non-finite at x={X[k]}, y={Y[k]}")
    sig = field_.sigma_at(X, Y)
    if not np.isfinite(sig).all():
        k = np.argwhere(~np.isfinite(sig))[0][0]
        raise ConfigError(f"sigma is non-finite at x={X[k]}, y={Y[k]}")
    aa = sig @ np.swapaxes(sig, -1, -2)
    eigmin = np.linalg.eigvalsh(aa)[..., 0]
    if eigmin.min() < nu:
        k = int(np.argmin(eigmin))
        raise NondegeneracyError(
            f"sigma*sigma^T has minimum eigenvalue {eigmin[k]:.3e} < {nu:g} "
            f"at x={X[k]}, y={Y[k]}")

    # periodicity: every coefficient must agree at y and y + e_k
    Yr = rng.random((16, d))
    Xr = lo + (hi - lo) * rng.random((16, d))
    base = [field_.b_at(Xr, Yr), field_.c_at(Xr, Yr), field_.sigma_at(Xr, Yr)]
    for k in range(d):
        Yk = Yr.copy()
        Yk[:, k] += 1.0
        shifted = [field_.b_at(Xr, Yk), field_.c_at(Xr, Yk), field_.sigma_at(Xr, Yk)]
        for f0, f1, what in zip(base, shifted, ("b", "c", "sigma")):
            err = np.max(np.abs(f0 - f1))
            if err > _PERIOD_TOL:
                raise ConfigError(
                    f"{what} is not 1-periodic in y_{k+1}: "
                    f"max |f(y) - f(y+e_{k+1})| = {err:.3e}")


# ---------------------------------------------------------------------------
# Regime velocity kernels


def velocity_kernel(regime, model: MultiscaleModel, x, y, z, dchi=None):
    """Averaged-velocity integrand lambda_i(x, y, z) for regime i.

    Regime 1 needs the cell-solution Jacobian dchi = (d chi_l / d y_k)(x, y)
    as an extra input; regimes 2 and 3 do not.  Affine in z.
    """
    coeff = model.coefficients
    x = np.asarray(x, dtype=float).reshape(coeff.d)
    y = np.asarray(y, dtype=float).reshape(coeff.d)
    z = np.asarray(z, dtype=float).reshape(coeff.d)
    c = coeff.c_at(x, y)
    sig = coeff.sigma_at(x, y)
    base = c + sig @ z
    if regime == 1:
        if dchi is None:
            raise ValueError("Regime 1 velocity needs the cell solution (dchi)")
        dchi = np.asarray(dchi, dtype=float).reshape(coeff.d, coeff.d)
        return (np.eye(coeff.d) + dchi) @ base
    if regime == 2:
        _, gamma = classify_regime(model)
        if gamma is None:
            raise ValueError("model is not in Regime 2")
        return gamma * coeff.b_at(x, y) + base
    if regime == 3:
        return base
    raise ValueError(f"unknown regime {regime!r}")
