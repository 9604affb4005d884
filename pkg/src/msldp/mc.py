"""Monte Carlo estimation of Laplace functionals E[exp(-h(X)/eps)].

The standard scheme averages exp(-h(X)/eps) over base trajectories; the
importance-sampling scheme simulates the controlled dynamics and
averages exp(-h(Xbar)/eps + logweight), which is unbiased for the same
quantity by the Girsanov identity.  Moments stream through a pooled
(count, mean, M2) merge, so disjoint seed ranges combine exactly and a
worker pool over trajectory chunks gives bit-identical results
regardless of scheduling (merges happen in submission order).

Path functionals are restricted to a built-in library (terminal cost,
running cost, smoothed indicator bump) so that runs are fully described
by a config file; all are bounded and continuous for bounded ingredient
expressions.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .errors import NonFiniteError
from .pathopt import PathProblem, minimize_action
from .simulate import auto_dt, run_batch

Z95 = 1.959963984540054


# ---------------------------------------------------------------------------
# Path functionals


class TerminalCost:
    """h(path) = F(X_T) with F an expression in x (or x_1..x_d)."""

    kind = "terminal"

    def __init__(self, f, d: int = 1):
        self.d = d
        if callable(f):
            self._fn = f
            self.source = getattr(f, "__name__", "<callable>")
        else:
            node = ex.parse(f) if isinstance(f, str) else f
            if d == 1:
                node = ex.substitute(node, {"x": ex.Name("x_1")})
            self.source = ex.to_source(node)
            self._fn = ex.compile_fn(node, tuple(f"x_{i+1}" for i in range(d)))

    def hook(self):
        return None

    def values(self, X_final, hook=None):
        cols = tuple(X_final[:, i] for i in range(self.d))
        return np.broadcast_to(np.asarray(self._fn(*cols), dtype=float),
                               (X_final.shape[0],))

    def terminal_value(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return float(self._fn(*tuple(x[i:i + 1] for i in range(self.d)))[0]) \
            if self.d > 1 else float(np.asarray(self._fn(x[0])))

    def path_value(self, times, states):
        return self.terminal_value(np.atleast_2d(states)[-1])


class RunningCost:
    """h(path) = integral g(X_t) dt, accumulated at left endpoints."""

    kind = "running"

    def __init__(self, g, d: int = 1):
        self.d = d
        node = ex.parse(g) if isinstance(g, str) else g
        if d == 1:
            node = ex.substitute(node, {"x": ex.Name("x_1")})
        self.source = ex.to_source(node)
        self._fn = ex.compile_fn(node, tuple(f"x_{i+1}" for i in range(d)))

    def _eval(self, X):
        cols = tuple(X[:, i] for i in range(self.d))
        return np.broadcast_to(np.asarray(self._fn(*cols), dtype=float),
                               (X.shape[0],))

    def hook(self):
        outer = self

        class _Acc:
            def on_start(self, t, X):
                self.acc = np.zeros(X.shape[0])

            def on_step(self, t, X, Y, u, X_next, dt):
                self.acc += outer._eval(X) * dt

            def on_finish(self, t, X, logw):
                pass

        return _Acc()

    def values(self, X_final, hook=None):
        return hook.acc

    def path_value(self, times, states):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if states.shape[1] != self.d:
            states = states.reshape(-1, self.d)
        dt = np.diff(np.asarray(times, dtype=float))
        return float(np.sum(self._eval(states[:-1]) * dt))

    def terminal_value(self, x):
        raise TypeError("running cost has no terminal reduction")


class SmoothedIndicator:
    """h = height * (1 - bump(|X_T - center| / width)).

    bump is the standard C-infinity mollifier exp(1 - 1/(1 - r^2)) on
    r < 1, so h is bounded, smooth, zero exactly at the center, and
    equal to height outside the bump support.  Stands in for a rare-set
    indicator while staying bounded and continuous.
    """

    kind = "terminal"

    def __init__(self, center, width, height=1.0, d: int = 1):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.width = float(width)
        self.height = float(height)
        self.d = d
        self.source = f"smoothed_indicator({center}, {width}, {height})"
        if self.width <= 0 or self.height <= 0:
            raise ValueError("width and height must be positive")

    def _bump(self, r2):
        out = np.zeros_like(r2)
        inside = r2 < 1.0
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
        return out

    def hook(self):
        return None

    def values(self, X_final, hook=None):
        r2 = np.sum((X_final - self.center) ** 2, axis=-1) / self.width ** 2
        return self.height * (1.0 - self._bump(r2))

    def terminal_value(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        r2 = np.atleast_1d(np.sum((x - self.center) ** 2) / self.width ** 2)
        return float(self.height * (1.0 - self._bump(r2)[0]))

    def path_value(self, times, states):
        return self.terminal_value(np.atleast_2d(states)[-1])


# ---------------------------------------------------------------------------
# Streaming moments and reports


@dataclass
class Moments:
    """Pooled (count, mean, M2); merge is associative and exact."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def add_batch(self, x):
        x = np.asarray(x, dtype=float)
        nb = x.size
        if nb == 0:
            return
        mb = float(x.mean())
        m2b = float(((x - mb) ** 2).sum())
        self.merge(Moments(nb, mb, m2b))

    def merge(self, other):
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean, other.m2
            return self
        n = self.n + other.n
        d = other.mean - self.mean
        self.m2 = self.m2 + other.m2 + d * d * self.n * other.n / n
        self.mean = self.mean + d * other.n / n
        self.n = n
        return self

    @property
    def variance(self):
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0


@dataclass(frozen=True)
class EstimatorReport:
    """One estimation run: moments, errors, and the LDP-scale readout."""

    scheme: str
    n: int
    eps: float
    mean: float
    variance: float
    rel_err: float              # standard error / mean
    ci95: tuple
    minus_eps_log_mean: float
    wall_seconds: float
    seed: int

    def to_dict(self):
        return {
            "scheme": self.scheme, "n": self.n, "eps": self.eps,
            "mean": self.mean, "variance": self.variance,
            "rel_err": self.rel_err, "ci95": list(self.ci95),
            "minus_eps_log_mean": (None if not math.isfinite(self.minus_eps_log_mean)
                                   else self.minus_eps_log_mean),
            "wall_seconds": self.wall_seconds, "seed": self.seed,
        }


def _report(scheme, eps, seed, moments: Moments, wall):
    mean = moments.mean
    var = moments.variance
    se = math.sqrt(var / moments.n) if moments.n > 0 else math.inf
    rel = se / mean if mean > 0 else math.inf
    ci = (mean - Z95 * se, mean + Z95 * se)
    mel = -eps * math.log(mean) if mean > 0 else math.inf
    return EstimatorReport(scheme=scheme, n=moments.n, eps=eps, mean=mean,
                           variance=var, rel_err=rel, ci95=ci,
                           minus_eps_log_mean=mel, wall_seconds=wall, seed=seed)


def merge_reports(a: EstimatorReport, b: EstimatorReport) -> EstimatorReport:
    """Pool two runs over disjoint trajectory ranges of the same setup."""
    if a.scheme != b.scheme or a.eps != b.eps:
        raise ValueError("cannot merge reports from different setups")
    ma = Moments(a.n, a.mean, a.variance * (a.n - 1) if a.n > 1 else 0.0)
    mb = Moments(b.n, b.mean, b.variance * (b.n - 1) if b.n > 1 else 0.0)
    ma.merge(mb)
    return _report(a.scheme, a.eps, a.seed, ma, a.wall_seconds + b.wall_seconds)


# ---------------------------------------------------------------------------
# The estimator


def estimate(model, h, eps, n, scheme="standard", control=None, seed=0,
             dt=None, T=1.0, index_offset=0, threads=1,
             chunk: int = 4096) -> EstimatorReport:
    """Estimate E[exp(-h(X^eps)/eps)] by standard or IS Monte Carlo.

    scheme "standard" ignores the control; scheme "is" simulates the
    controlled dynamics and reweights by exp(logweight).  Trajectory k
    uses the RNG stream (seed, index_offset + k), so results are
    deterministic and runs over disjoint index ranges pool exactly via
    merge_reports.
    """
    if scheme not in ("standard", "is"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "is" and control is None:
        raise ValueError("importance sampling needs a control")
    if dt is None:
        dt = auto_dt(model, eps, T)
    t0 = time.perf_counter()
    starts = list(range(0, n, chunk))

    def run_chunk(start):
        m = min(chunk, n - start)
        hook = h.hook()
        hooks = (hook,) if hook is not None else ()
        Xf, logw = run_batch(model, eps, m, T=T, dt=dt, seed=seed,
                             control=control if scheme == "is" else None,
                             hooks=hooks, index_offset=index_offset + start)
        hv = h.values(Xf, hook)
        logs = -hv / eps + (logw if scheme == "is" else 0.0)
        samples = np.exp(logs)
        if not np.isfinite(samples).all():
            bad = int(np.argwhere(~np.isfinite(samples))[0][0])
            raise NonFiniteError(
                f"non-finite sample for trajectory {index_offset + start + bad}")
        return samples

    moments = Moments()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for samples in pool.map(run_chunk, starts):
                moments.add_batch(samples)
    else:
        for start in starts:
            moments.add_batch(run_chunk(start))
    wall = time.perf_counter() - t0
    return _report(scheme, eps, seed, moments, wall)


@dataclass(frozen=True)
class SlopeTable:
    """-eps log(mean) against the variational reference value."""

    rows: tuple                 # EstimatorReport per ladder entry
    reference: float
    reference_path: object

    def table(self):
        return [(r.eps, r.minus_eps_log_mean) for r in self.rows]


def ldp_slope(model, h, eps_ladder, n, scheme="standard", seed=0,
              rate_fn=None, reference=None, T=1.0, knots=64,
              control_factory=None, dt=None, threads=1) -> SlopeTable:
    """Empirical -eps log E[exp(-h/eps)] ladder plus the pathopt reference.

    The reference inf over paths of [S + h] is minimized with the given
    local-rate evaluator unless a precomputed value is passed.  The
    ladder must be strictly decreasing in eps.  With scheme "is",
    control_factory(eps) must build the control for each rung.
    """
    ladder = [float(e) for e in eps_ladder]
    if any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("eps ladder must be strictly decreasing")
    ref_path = None
    if reference is None:
        if rate_fn is None:
            raise ValueError("need rate_fn or a precomputed reference")
        if h.kind != "terminal":
            raise NotImplementedError(
                "the built-in reference handles terminal functionals only; "
                "pass a precomputed reference for running costs")
        problem = PathProblem(T=T, knots=knots, x0=model.x0,
                              terminal_cost=h.terminal_value)
        res = minimize_action(problem, rate_fn)
        reference = res.value
        ref_path = res.path
    rows = []
    for e in ladder:
        control = control_factory(e) if control_factory is not None else None
        rows.append(estimate(model, h, e, n,
                             scheme=scheme, control=control, seed=seed,
                             dt=dt, T=T, threads=threads))
    return SlopeTable(rows=tuple(rows), reference=float(reference),
                      reference_path=ref_path)
