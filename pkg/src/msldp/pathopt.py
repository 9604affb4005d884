"""Discrete action minimization over paths on a uniform knot grid.

The objective is the composite-midpoint action

    S(x_0..x_M) = sum_k L( (x_k + x_{k+1})/2, (x_{k+1} - x_k)/dt ) dt

plus an optional terminal cost at x_M.  The start knot is always fixed;
the end knot is fixed for two-point problems and free under a terminal
cost.  Minimization is projected gradient descent (the projection pins
the fixed knots) with a Barzilai-Borwein initial step and a backtracking
Armijo line search, so accepted iterations never increase the value.
Gradients are centered finite differences in knot coordinates; each knot
only touches its two neighboring intervals, so a full gradient costs two
batched rate evaluations.
"""

import math
from dataclasses import dataclass

import numpy as np

from .simulate import DiscretePath


@dataclass(frozen=True)
class PathProblem:
    """Fixed horizon, knot count, start point, and terminal condition."""

    T: float
    knots: int                  # number of intervals M; states are M+1
    x0: np.ndarray
    endpoint: np.ndarray = None     # fixed terminal state, or None
    terminal_cost: object = None    # callable x -> float, or None

    def __post_init__(self):
        if self.knots < 2:
            raise ValueError(f"need at least 2 intervals, got {self.knots}")
        if self.T <= 0:
            raise ValueError(f"T must be positive, got {self.T}")
        object.__setattr__(self, "x0",
                           np.atleast_1d(np.asarray(self.x0, dtype=float)))
        if self.endpoint is not None:
            object.__setattr__(self, "endpoint",
                               np.atleast_1d(np.asarray(self.endpoint, dtype=float)))


@dataclass(frozen=True)
class PiecewiseConstantSchedule:
    """Velocity schedule psi-dot: constant on each knot interval."""

    times: np.ndarray           # interval left edges, length M
    values: np.ndarray          # (M, d)
    dt: float

    def __call__(self, t):
        k = min(int(t / self.dt), len(self.values) - 1)
        return self.values[max(k, 0)]


@dataclass(frozen=True)
class PathOptResult:
    path: DiscretePath
    value: float
    schedule: PiecewiseConstantSchedule
    converged: bool
    iterations: int
    grad_norm: float


def _objective_terms(states, dt, rate_fn, d):
    mids = 0.5 * (states[1:] + states[:-1])
    vels = np.diff(states, axis=0) / dt
    if d == 1:
        vals = np.asarray(rate_fn(mids[:, 0], vels[:, 0]), dtype=float)
    else:
        vals = np.array([float(rate_fn(m, v)) for m, v in zip(mids, vels)])
    return vals


def _objective(states, dt, rate_fn, d, terminal_cost):
    vals = _objective_terms(states, dt, rate_fn, d)
    if not np.all(np.isfinite(vals)):
        return math.inf
    total = float(np.sum(vals) * dt)
    if terminal_cost is not None:
        total += float(terminal_cost(states[-1]))
    return total


def _gradient(states, dt, rate_fn, d, terminal_cost, free_end, fd_scale=1e-6):
    """Centered finite differences; exploits the two-interval stencil."""
    M = states.shape[0] - 1
    free = list(range(1, M)) + ([M] if free_end else [])
    grad = np.zeros_like(states)
    if d == 1:
        s = states[:, 0]
        mids = 0.5 * (s[1:] + s[:-1])
        vels = np.diff(s) / dt
        idx = np.array(free)
        h = fd_scale * (1.0 + np.abs(s[idx]))
        # intervals touched by knot j: j-1 (right end) and j (left end)
        m_batches, v_batches, signs, cols = [], [], [], []
        for sgn in (+1.0, -1.0):
            dm = 0.5 * sgn * h
            dv = sgn * h / dt
            left = idx - 1
            m_batches.append(mids[left] + dm)
            v_batches.append(vels[left] + dv)
            right = np.minimum(idx, M - 1)
            valid = idx <= M - 1
            m_batches.append(np.where(valid, mids[right] + dm, mids[right]))
            v_batches.append(np.where(valid, vels[right] - dv, vels[right]))
        mb = np.concatenate(m_batches)
        vb = np.concatenate(v_batches)
        vals = np.asarray(rate_fn(mb, vb), dtype=float).reshape(4, -1)
        base_left = np.asarray(rate_fn(mids[idx - 1], vels[idx - 1]), dtype=float)
        has_right = idx <= M - 1
        base_right = np.asarray(
            rate_fn(mids[np.minimum(idx, M - 1)], vels[np.minimum(idx, M - 1)]),
            dtype=float)
        plus = (vals[0] - base_left) + np.where(has_right, vals[1] - base_right, 0.0)
        minus = (vals[2] - base_left) + np.where(has_right, vals[3] - base_right, 0.0)
        g = (plus - minus) * dt / (2.0 * h)
        if free_end and terminal_cost is not None:
            j = len(idx) - 1
            hj = h[j]
            tp = terminal_cost(states[-1] + np.array([hj]))
            tm = terminal_cost(states[-1] - np.array([hj]))
            g[j] += (tp - tm) / (2.0 * hj)
        grad[idx, 0] = g
        return grad
    # generic dimension: plain per-coordinate centered differences
    for j in free:
        for c in range(d):
            h = fd_scale * (1.0 + abs(states[j, c]))
            sp = states.copy()
            sp[j, c] += h
            sm = states.copy()
            sm[j, c] -= h
            fp = _objective(sp, dt, rate_fn, d, terminal_cost)
            fm = _objective(sm, dt, rate_fn, d, terminal_cost)
            grad[j, c] = (fp - fm) / (2 * h)
    return grad


def minimize_action(problem: PathProblem, rate_fn, init=None,
                    max_iter: int = 20000, gtol: float = 1e-6,
                    fd_scale: float = 1e-6) -> PathOptResult:
    """Minimize the discrete action; returns path, value and schedule.

    init may supply starting knot states (M+1, d); the default is the
    straight line to the endpoint (two-point problems) or the constant
    path (free endpoint).  Non-convergence returns the best iterate with
    converged=False.
    """
    d = problem.x0.size
    M = problem.knots
    dt = problem.T / M
    free_end = problem.endpoint is None
    if init is not None:
        states = np.array(init, dtype=float).reshape(M + 1, d)
    elif problem.endpoint is not None:
        states = np.linspace(problem.x0, problem.endpoint, M + 1)
    else:
        states = np.tile(problem.x0, (M + 1, 1))
    states[0] = problem.x0
    if not free_end:
        states[-1] = problem.endpoint
    terminal = problem.terminal_cost if free_end else None

    f = _objective(states, dt, rate_fn, d, terminal)
    if not math.isfinite(f):
        raise ValueError("rate function is not finite on the initial path")
    g = _gradient(states, dt, rate_fn, d, terminal, free_end, fd_scale)
    step = 1.0 / (1.0 + float(np.max(np.abs(g))))
    prev_states = None
    prev_g = None
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= gtol * (1.0 + abs(f)):
            converged = True
            break
        if prev_states is not None:
            s = (states - prev_states).ravel()
            yv = (g - prev_g).ravel()
            sy = float(s @ yv)
            if sy > 0:
                step = float(s @ s) / sy
            # otherwise keep the previous accepted step
        gsq = float(np.sum(g * g))
        accepted = False
        t = step
        for _ in range(50):
            cand = states - t * g
            fc = _objective(cand, dt, rate_fn, d, terminal)
            if math.isfinite(fc) and fc <= f - 1e-4 * t * gsq:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        prev_states, prev_g = states, g
        states, f = cand, fc
        g = _gradient(states, dt, rate_fn, d, terminal, free_end, fd_scale)
        step = t
    gnorm = float(np.max(np.abs(g)))
    times = np.arange(M + 1) * dt
    path = DiscretePath(times=times, states=states, logweight=0.0)
    schedule = PiecewiseConstantSchedule(times=times[:-1],
                                         values=np.diff(states, axis=0) / dt,
                                         dt=dt)
    return PathOptResult(path=path, value=f, schedule=schedule,
                         converged=converged, iterations=it, grad_norm=gnorm)
