"""Euler-Maruyama integration of the base and controlled SDE.

One explicit step of the controlled dynamics reads

    X_{k+1} = X_k + [ (eps/delta) b + c + sigma u ] dt + sqrt(eps) sigma dW,

with u = 0 for the base dynamics.  Along controlled runs the Girsanov
log-weight

    logweight -= (1/sqrt(eps)) u_k . dW_k + (1/(2 eps)) |u_k|^2 dt

accumulates so that exp(logweight) is the Radon-Nikodym factor restoring
the base law.  The step size must satisfy dt <= delta^2/10 (the fast
process carries an O(eps/delta^2) drift; stability before accuracy).

Randomness is counter-based: trajectory k draws from a Philox stream
keyed by (seed, k), so results are reproducible regardless of batching
or worker scheduling.  Trajectories are embarrassingly parallel; the
model and control field are shared read-only.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, StepSizeError

DT_SAFETY = 10.0


@dataclass(frozen=True)
class DiscretePath:
    """Uniform time grid, states, accumulated Girsanov log-weight."""

    times: np.ndarray
    states: np.ndarray          # (M+1, d)
    logweight: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.asarray(self.states, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if not np.isfinite(s).all():
            raise ValueError("states contain non-finite values")
        if not math.isfinite(self.logweight):
            raise ValueError("logweight is non-finite")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", s)

    @property
    def d(self):
        return self.states.shape[1]


def check_dt(model, eps, dt):
    delta = model.delta(eps)
    bound = delta ** 2 / DT_SAFETY
    if dt > bound * (1 + 1e-12):
        raise StepSizeError(
            f"dt = {dt:g} too large: need dt <= delta^2/{DT_SAFETY:g} = "
            f"{bound:g} (delta = {delta:g} at eps = {eps:g})")
    return delta


def auto_dt(model, eps, T):
    """Largest admissible uniform step that divides T into whole steps."""
    delta = model.delta(eps)
    bound = delta ** 2 / DT_SAFETY
    n_steps = max(1, int(math.ceil(T / bound)))
    return T / n_steps


def _path_generators(seed, n, index_offset=0):
    return [np.random.Generator(np.random.Philox(
        key=np.array([seed & (2**64 - 1), (index_offset + k) & (2**64 - 1)],
                     dtype=np.uint64)))
            for k in range(n)]


class _Engine:
    """Vectorized stepping over a batch of trajectories."""

    def __init__(self, model, eps, x0, T, dt, seed, control=None,
                 index_offset=0, check_every=1):
        self.model = model
        self.eps = float(eps)
        self.delta = check_dt(model, eps, dt)
        if T <= 0:
            raise ValueError(f"T must be positive, got {T}")
        self.T = float(T)
        self.dt = float(dt)
        self.n_steps = int(round(T / dt))
        if abs(self.n_steps * dt - T) > 1e-9 * T:
            self.n_steps = int(math.ceil(T / dt))
        self.seed = seed
        self.control = control
        self.index_offset = index_offset
        self.check_every = max(1, int(check_every))
        coeff = model.coefficients
        self.d = coeff.d
        self.x0 = np.asarray(x0, dtype=float).reshape(self.d) \
            if x0 is not None else model.x0
        self.const_sigma = None
        if coeff.is_constant_sigma():
            self.const_sigma = coeff.sigma_at(np.zeros(self.d), np.zeros(self.d))

    def run(self, n_paths, hooks=(), store=False, noise=None):
        """March the batch; returns (X_final, logweight, stored_states)."""
        coeff = self.model.coefficients
        d, dt, eps = self.d, self.dt, self.eps
        sq_eps = math.sqrt(eps)
        fast = eps / self.delta
        X = np.tile(self.x0, (n_paths, 1))
        logw = np.zeros(n_paths)
        stored = None
        if store:
            stored = np.empty((self.n_steps + 1, n_paths, d))
            stored[0] = X
        for h in hooks:
            h.on_start(0.0, X)

        if noise is None:
            gens = _path_generators(self.seed, n_paths, self.index_offset)
            chunk = max(1, min(self.n_steps, (1 << 21) // max(1, n_paths)))
        else:
            gens = None
            chunk = self.n_steps

        fast_1d = d == 1
        if fast_1d:
            bfn = coeff._fns["b1"]
            cfn = coeff._fns["c1"]
            sfn = coeff._fns["sigma11"]
            sig0 = float(self.const_sigma[0, 0]) if self.const_sigma is not None \
                else None
            x = X[:, 0].copy()

        k = 0
        while k < self.n_steps:
            m = min(chunk, self.n_steps - k)
            if noise is None:
                dW = np.empty((m, n_paths, d))
                for i, g in enumerate(gens):
                    dW[:, i, :] = g.standard_normal((m, d))
                dW *= math.sqrt(dt)
            else:
                dW = np.asarray(noise[k:k + m], dtype=float)
            for j in range(m):
                t = (k + j) * dt
                if fast_1d:
                    Xprev = x[:, None]
                    y = (x / self.delta) % 1.0
                    drift = fast * bfn(x, y) + cfn(x, y)
                    sig = sig0 if sig0 is not None else sfn(x, y)
                    u = None
                    if self.control is not None:
                        u = np.asarray(self.control(t, Xprev),
                                       dtype=float).reshape(-1)
                        drift = drift + sig * u
                    dWj = dW[j, :, 0]
                    x = x + drift * dt + sq_eps * (sig * dWj)
                    if u is not None:
                        logw -= u * dWj / sq_eps + u * u * (dt / (2 * eps))
                    X = x[:, None]
                    Y = y[:, None]
                    u_col = None if u is None else u[:, None]
                else:
                    Xprev = X
                    Y = (X / self.delta) % 1.0
                    drift = fast * coeff.b_at(X, Y) + coeff.c_at(X, Y)
                    sig = self.const_sigma if self.const_sigma is not None \
                        else coeff.sigma_at(X, Y)
                    u = None
                    if self.control is not None:
                        u = np.asarray(self.control(t, X), dtype=float)
                        if u.ndim == 1:
                            u = np.broadcast_to(u, (n_paths, d))
                        drift = drift + _matvec(sig, u)
                    dWj = dW[j]
                    X = X + drift * dt + sq_eps * _matvec(sig, dWj)
                    if u is not None:
                        logw -= (np.sum(u * dWj, axis=-1) / sq_eps
                                 + np.sum(u * u, axis=-1) * dt / (2 * eps))
                    u_col = u
                if (k + j) % self.check_every == 0 or k + j == self.n_steps - 1:
                    if not np.isfinite(X).all():
                        bad = int(np.argwhere(~np.isfinite(X))[0][0])
                        raise NonFiniteError(
                            f"non-finite state in trajectory "
                            f"{self.index_offset + bad} at step {k + j + 1} "
                            f"(t = {t + dt:g})")
                for h in hooks:
                    h.on_step(t, Xprev, Y, u_col, X, dt)
                if store:
                    stored[k + j + 1] = X
            k += m
        for h in hooks:
            h.on_finish(self.n_steps * dt, X, logw)
        return X, logw, stored


def _matvec(sig, v):
    if sig.ndim == 2 and sig.shape == v.shape[-1:] * 2:
        return v @ sig.T
    return np.einsum("...ij,...j->...i", sig, v)


def simulate(model, eps, x0=None, T=1.0, dt=None, seed=0, control=None,
             noise=None) -> DiscretePath:
    """One trajectory with full state storage.

    dt defaults to the stability bound delta^2/10 (rounded to divide T);
    larger steps are refused.  `noise` optionally supplies the Brownian
    increments, shape (n_steps, 1, d), for strong-error studies.
    Deterministic given (seed, model, eps, dt, control).
    """
    if dt is None:
        dt = auto_dt(model, eps, T)
    eng = _Engine(model, eps, x0, T, dt, seed, control)
    _, logw, stored = eng.run(1, store=True, noise=noise)
    times = np.arange(eng.n_steps + 1) * dt
    return DiscretePath(times=times, states=stored[:, 0, :],
                        logweight=float(logw[0]))


def run_batch(model, eps, n_paths, x0=None, T=1.0, dt=None, seed=0,
              control=None, hooks=(), index_offset=0, check_every=1):
    """Stream a batch of trajectories through hooks without storing paths.

    Returns (X_final (n, d), logweight (n,)).
    """
    if dt is None:
        dt = auto_dt(model, eps, T)
    eng = _Engine(model, eps, x0, T, dt, seed, control,
                  index_offset=index_offset, check_every=check_every)
    Xf, logw, _ = eng.run(n_paths, hooks=hooks)
    return Xf, logw


# ---------------------------------------------------------------------------
# Occupation measures


@dataclass
class OccupationMeasure:
    """Sliding-window empirical law of (control, fast variable, time).

    raw[i] holds the un-windowed time histogram on fine bins of width
    tbin; the windowed measure P spreads each sample over the anchor
    times [s - window, s], implemented as a length window/tbin moving
    sum.  Mass over Z x Y x [0, t] equals t up to O(window) edge effects.
    """

    window: float               # the time-scale separation width
    T: float
    tbin: float
    y_bins: int
    z_edges: np.ndarray
    raw: np.ndarray             # (nt, ny, nz), un-windowed
    n_paths: int = 1

    def windowed(self):
        m = max(1, int(round(self.window / self.tbin)))
        nt = self.raw.shape[0]
        out = np.zeros_like(self.raw)
        for o in range(min(m, nt)):
            if o == 0:
                out += self.raw
            else:
                out[:nt - o] += self.raw[o:]
        return out / m

    def mass_function(self):
        """(anchor times, cumulative mass of Z x Y x [0, t]) per path."""
        P = self.windowed()
        mass = np.cumsum(P.sum(axis=(1, 2))) / self.n_paths
        t = (np.arange(len(mass)) + 1) * self.tbin
        return t, mass

    def y_marginal(self):
        """Probability vector over the y bins."""
        P = self.windowed().sum(axis=(0, 2))
        return P / P.sum()

    def z_marginal(self):
        P = self.windowed().sum(axis=(0, 1))
        return P / P.sum()

    def y_centers(self):
        return (np.arange(self.y_bins) + 0.5) / self.y_bins

    def z_centers(self):
        return 0.5 * (self.z_edges[1:] + self.z_edges[:-1])


class OccupationAccumulator:
    """Streaming hook that bins (u_s, y_s) against fine time bins."""

    def __init__(self, window, T, y_bins=32, z_bins=33, z_range=(-4.0, 4.0)):
        self.window = float(window)
        self.T = float(T)
        self.tbin = min(self.window / 4.0, self.T)
        self.nt = max(1, int(math.ceil(self.T / self.tbin - 1e-9)))
        self.y_bins = int(y_bins)
        self.z_edges = np.linspace(z_range[0], z_range[1], int(z_bins) + 1)
        self.raw = np.zeros((self.nt, self.y_bins, int(z_bins)))
        self.n_paths = 0

    def on_start(self, t, X):
        self.n_paths = X.shape[0]
        if X.shape[1] != 1:
            raise NotImplementedError(
                "occupation binning is implemented for d = 1")
        self._zero_bin = np.full(
            X.shape[0],
            np.clip(np.searchsorted(self.z_edges, 0.0) - 1,
                    0, len(self.z_edges) - 2),
            dtype=int)

    def on_step(self, t, X, Y, u, X_next, dt):
        tb = min(int(t / self.tbin), self.nt - 1)
        yb = np.minimum((Y[:, 0] * self.y_bins).astype(int), self.y_bins - 1)
        if u is None:
            zb = self._zero_bin
        else:
            zb = np.clip(np.searchsorted(self.z_edges, u[:, 0]) - 1,
                         0, len(self.z_edges) - 2)
        np.add.at(self.raw[tb], (yb, zb), dt)

    def on_finish(self, t, X, logw):
        pass

    def result(self) -> OccupationMeasure:
        return OccupationMeasure(window=self.window, T=self.T, tbin=self.tbin,
                                 y_bins=self.y_bins, z_edges=self.z_edges,
                                 raw=self.raw, n_paths=self.n_paths)


def occupation_measure(path: DiscretePath, controls=None, window=None,
                       model=None, eps=None, y_bins=32, z_bins=33,
                       z_range=(-4.0, 4.0)) -> OccupationMeasure:
    """Occupation measure of one stored path.

    `controls` holds the per-step control values (length M, or None for
    uncontrolled runs).  The window defaults to sqrt(eps), which shrinks
    with eps while staying far above the fast scale delta.  The window
    must be a multiple of dt (up to rounding).
    """
    dt = float(path.times[1] - path.times[0])
    T = float(path.times[-1])
    if window is None:
        if eps is None:
            raise ValueError("need either a window or eps (default sqrt(eps))")
        window = math.sqrt(eps)
    ratio = window / dt
    if abs(ratio - round(ratio)) > 1e-6 * max(1.0, ratio):
        raise ValueError(f"window = {window:g} is not a multiple of dt = {dt:g}")
    if model is None:
        raise ValueError("model is required to reduce states to the torus")
    delta = model.delta(eps) if eps is not None else None
    if delta is None:
        raise ValueError("eps is required to form y = x/delta")
    acc = OccupationAccumulator(window, T, y_bins, z_bins, z_range)
    X = path.states[:-1]
    acc.on_start(0.0, X[:1])
    acc.n_paths = 1
    Y = (X / delta) % 1.0
    for k in range(X.shape[0]):
        u = None if controls is None else np.asarray(controls[k]).reshape(1, -1)
        acc.on_step(float(path.times[k]), X[k:k + 1], Y[k:k + 1], u, None, dt)
    return acc.result()


def wasserstein1_circle(p, q, width=None):
    """W1 distance between two probability vectors on circle bins.

    Uses the shift-optimal coupling: W1 = min_c integral |F - G - c| with
    the optimum at the weighted median of F - G.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    w = width if width is not None else 1.0 / len(p)
    diff = np.cumsum(p - q)
    c = np.median(diff)
    return float(np.sum(np.abs(diff - c)) * w)
