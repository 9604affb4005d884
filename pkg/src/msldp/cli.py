"""Command-line surface: config in, CSV/JSON out.

Subcommands: homogenize, rate, path, simulate, mc, selftest.  Exit
codes: 0 success, 1 configuration/parse error, 2 numerical failure,
3 acceptance failure in selftest.  Floating-point output is serialized
at 17 significant digits, so identical config + seed reproduce outputs
byte for byte (the JSON wall_seconds field is the one documented
exception).
"""

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from . import mc as mc_mod
from . import ratefn, simulate
from .config import RunConfig, load_config, parse_lattice
from .control import bind_feedback, regime1_control, regime2_control
from .errors import ConfigError, ExprError, MsldpError
from .homogenize import HomogenizedModel, export_csv, solve_at
from .model import build_model, classify_regime
from .pathopt import PathProblem, minimize_action
from .torus import TorusGrid

SCHEMA = "msldp/1"


def _fmt(v):
    return f"{float(v):.17g}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (int, float, np.floating))
                        else v for v in row])
    return path


def _provenance(args, cfg):
    return {"schema": SCHEMA, "config": args.config,
            "overrides": cfg.overrides}


def _model(cfg):
    return build_model(cfg.model)


def _ensure_outdir(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


def cmd_homogenize(args, cfg):
    model = _model(cfg)
    xs = parse_lattice(args.x) if args.x else cfg.x_lattice
    if xs is None:
        raise ConfigError("need an x-lattice ([grid] x_lattice or --x)")
    grid = TorusGrid(model.d, cfg.grid_n)
    hom = HomogenizedModel(model, xs, grid, cfg.scheme)
    out = os.path.join(_ensure_outdir(cfg), "homogenize.csv")
    export_csv(hom, out)
    print(out)
    return 0


def cmd_rate(args, cfg):
    model = _model(cfg)
    betas = [float(b) for b in args.beta.split(",")]
    xs = parse_lattice(args.x) if args.x else np.atleast_1d(model.x0[0])
    regime = args.regime
    grid = TorusGrid(1, cfg.grid_n) if model.d == 1 else TorusGrid(model.d, cfg.grid_n)
    rows = []
    for xv in np.atleast_1d(xs):
        if regime == 1:
            point = solve_at(model, np.full(model.d, xv), grid, cfg.scheme)
            for b in betas:
                res = ratefn.local_rate_r1(point, np.full(model.d, xv),
                                           np.full(model.d, b))
                rows.append((xv, b, res.value, ""))
        elif regime == 2:
            for b in betas:
                res = ratefn.local_rate_r2(model, [xv], b, zmax=cfg.zmax,
                                           grid=grid, scheme=cfg.scheme)
                rows.append((xv, b, res.value, res.dual[0]))
        elif regime == 3:
            for b in betas:
                res = ratefn.local_rate_r3(model, [xv], b)
                rows.append((xv, b, res.value, res.dual))
        else:
            raise ConfigError(f"unknown regime {regime}")
    out = os.path.join(_ensure_outdir(cfg), "rate.csv")
    _write_csv(out, ["x", "beta", "L", "dual"], rows)
    for r in rows:
        print(f"L_{regime}(x={r[0]:g}, beta={r[1]:g}) = {r[2]:.12g}")
    print(out)
    return 0


def _rate_evaluator(model, cfg):
    regime, _ = classify_regime(model)
    if regime == 1:
        if cfg.x_lattice is None:
            raise ConfigError("Regime-1 path optimization needs [grid] x_lattice")
        hom = HomogenizedModel(model, cfg.x_lattice,
                               TorusGrid(model.d, cfg.grid_n), cfg.scheme)
        return ratefn.r1_evaluator(hom), hom
    if regime == 2:
        return ratefn.r2_evaluator(model, zmax=cfg.zmax,
                                   grid=TorusGrid(1, min(cfg.grid_n, 128))), None
    return ratefn.r3_evaluator(model), None


def _initial_path(model, cfg, h, knots):
    x0 = float(model.x0[0])
    if getattr(h, "center", None) is not None:
        target = float(np.atleast_1d(h.center)[0])
        return np.linspace([x0], [target], knots + 1)
    return None


def cmd_path(args, cfg):
    model = _model(cfg)
    knots = cfg.knots
    rate_fn, _ = _rate_evaluator(model, cfg)
    if args.target is not None:
        problem = PathProblem(T=cfg.T, knots=knots, x0=model.x0,
                              endpoint=[float(args.target)])
        init = None
    else:
        h = cfg.build_functional(model.d)
        if h.kind != "terminal":
            raise ConfigError("path optimization needs a terminal functional "
                              "or --target")
        problem = PathProblem(T=cfg.T, knots=knots, x0=model.x0,
                              terminal_cost=h.terminal_value)
        init = _initial_path(model, cfg, h, knots)
    res = minimize_action(problem, rate_fn, init=init)
    out = os.path.join(_ensure_outdir(cfg), "path.csv")
    psid = np.vstack([res.schedule.values, res.schedule.values[-1:]])
    _write_csv(out, ["t", "psi", "psidot"],
               [(t, s[0], v[0]) for t, s, v in
                zip(res.path.times, res.path.states, psid)])
    print(f"value = {res.value:.12g}  converged = {res.converged}")
    print(out)
    return 0


def cmd_simulate(args, cfg):
    model = _model(cfg)
    eps = cfg.eps
    dt = cfg.dt if cfg.dt is not None else simulate.auto_dt(model, eps, cfg.T)
    n = args.n if args.n is not None else min(cfg.n, 200)
    outdir = _ensure_outdir(cfg)
    window = cfg.window if cfg.window is not None else math.sqrt(eps)
    hooks = ()
    acc = None
    if model.d == 1:
        acc = simulate.OccupationAccumulator(window=window, T=cfg.T)
        hooks = (acc,)
    simulate.run_batch(model, eps, n, T=cfg.T, dt=dt, seed=cfg.seed,
                       hooks=hooks, check_every=64)
    path = simulate.simulate(model, eps, T=cfg.T, dt=dt, seed=cfg.seed)
    _write_csv(os.path.join(outdir, "path0.csv"),
               ["t"] + [f"x_{i+1}" for i in range(model.d)] + ["logweight"],
               [(t, *s, path.logweight if k == len(path.times) - 1 else 0.0)
                for k, (t, s) in enumerate(zip(path.times, path.states))])
    if acc is not None:
        occ = acc.result()
        _write_csv(os.path.join(outdir, "occupation_y.csv"),
                   ["y_center", "probability"],
                   list(zip(occ.y_centers(), occ.y_marginal())))
        t, mass = occ.mass_function()
        _write_csv(os.path.join(outdir, "occupation_mass.csv"),
                   ["t", "mass"], list(zip(t, mass)))
    print(outdir)
    return 0


def _build_is_control(model, cfg, h):
    regime, _ = classify_regime(model)
    eps = cfg.eps
    delta = model.delta(eps)
    rate_fn, hom = _rate_evaluator(model, cfg)
    problem = PathProblem(T=cfg.T, knots=cfg.knots, x0=model.x0,
                          terminal_cost=h.terminal_value)
    res = minimize_action(problem, rate_fn,
                          init=_initial_path(model, cfg, h, cfg.knots))
    if regime == 1:
        field = regime1_control(hom, res.schedule)
    elif regime == 2:
        if cfg.x_lattice is None:
            raise ConfigError("Regime-2 IS needs [grid] x_lattice")
        field = regime2_control(model, res.schedule, cfg.x_lattice,
                                grid=TorusGrid(1, min(cfg.grid_n, 128)),
                                zmax=cfg.zmax)
    else:
        raise ConfigError("importance sampling controls exist for "
                          "Regimes 1 and 2 only")
    return bind_feedback(field, eps, delta), res


def cmd_mc(args, cfg):
    model = _model(cfg)
    h = cfg.build_functional(model.d)
    schemes = {"standard": ["standard"], "is": ["is"],
               "both": ["standard", "is"]}[args.scheme]
    outdir = _ensure_outdir(cfg)
    control = None
    reference = None
    if "is" in schemes:
        control, pathres = _build_is_control(model, cfg, h)
        reference = pathres.value
    reports = {}
    for scheme in schemes:
        rep = mc_mod.estimate(model, h, cfg.eps, cfg.n, scheme=scheme,
                              control=control, seed=cfg.seed, dt=cfg.dt,
                              T=cfg.T, threads=cfg.threads)
        reports[scheme] = rep
        payload = rep.to_dict()
        payload["provenance"] = _provenance(args, cfg)
        if reference is not None:
            payload["variational_reference"] = reference
        out = os.path.join(outdir, f"mc_{scheme}.json")
        with open(out, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"{scheme}: mean = {rep.mean:.6g}  rel_err = {rep.rel_err:.4g}  "
              f"-eps log mean = {rep.minus_eps_log_mean:.6g}")
        print(out)
    if cfg.eps_ladder:
        rate_fn, _ = _rate_evaluator(model, cfg)
        table = mc_mod.ldp_slope(model, h, cfg.eps_ladder, cfg.n,
                                 scheme="standard", seed=cfg.seed,
                                 rate_fn=rate_fn, T=cfg.T, knots=cfg.knots,
                                 threads=cfg.threads)
        out = os.path.join(outdir, "ladder.csv")
        _write_csv(out, ["eps", "minus_eps_log_mean", "rel_err", "reference"],
                   [(r.eps, r.minus_eps_log_mean, r.rel_err, table.reference)
                    for r in table.rows])
        print(out)
    return 0


def cmd_selftest(args, cfg):
    """Fast analytic-oracle suite; exit 3 on any failure."""
    from scipy.integrate import quad
    from scipy.special import iv
    failures = 0

    def check(name, ok, detail=""):
        nonlocal failures
        status = "PASS" if ok else "FAIL"
        if not ok:
            failures += 1
        print(f"[{status}] {name} {detail}")

    from . import expr as ex
    e = ex.parse("1.5*(x^2-1)^2")
    check("expr round-trip",
          ex.to_source(ex.parse(ex.to_source(e))) == ex.to_source(e))
    d = ex.differentiate(e, "x")
    check("expr derivative", abs(ex.evaluate(d, {"x": 0.7}) - 6*0.7*(0.49-1)) < 1e-12)

    grid = TorusGrid(1, 256)
    y = grid.nodes()
    from .torus import GridFunction, quadrature
    f = GridFunction(grid, np.exp(-np.cos(2*np.pi*y)))
    check("quadrature Bessel", abs(quadrature(f) - iv(0, 1.0)) < 1e-10,
          f"got {quadrature(f):.12f}")

    spec = {"dim": 1, "Q": "cos(2*pi*y)+sin(2*pi*y)", "V": "1.5*(x^2-1)^2",
            "D": 1, "b": "-dQ/dy", "c": "-dV/dx", "sigma": "sqrt(2*D)",
            "a": 2, "kappa": 1, "x0": -1}
    model = build_model(spec)
    point = solve_at(model, [-1.0], TorusGrid(1, 512))
    qex = 2.0 / iv(0, math.sqrt(2)) ** 2
    check("effective diffusivity", abs(point.q[0, 0] - qex) < 1e-8,
          f"q = {point.q[0,0]:.10f} vs {qex:.10f}")
    target = np.exp(np.cos(2*np.pi*point.grid.nodes())
                    + np.sin(2*np.pi*point.grid.nodes()))
    target /= target.mean()
    got = 1 + point.dchi.values[:, 0, 0]
    check("cell solution", float(np.max(np.abs(got - target) / target)) < 1e-6)

    m2 = build_model({"dim": 1, "b": "0", "c": "0", "sigma": "1.5",
                      "a": 1, "kappa": 1, "x0": 0})
    r2 = ratefn.local_rate_r2(m2, [0.0], 1.2, zmax=6.0, grid=TorusGrid(1, 128))
    check("Regime-2 constant", abs(r2.value - 1.2**2/(2*1.5**2)) < 1e-8,
          f"L2 = {r2.value:.12f}")

    m3 = build_model({"dim": 1, "b": "0", "c": "0", "sigma": "1",
                      "a": 0.5, "kappa": 1, "x0": 0})
    r3 = ratefn.local_rate_r3(m3, [0.0], 2.0)
    check("Regime-3 closed form", abs(r3.value - 2.0) < 1e-8,
          f"L3 = {r3.value:.12f}")

    rng = np.random.default_rng(0)
    ok = True
    for _ in range(100):
        n = 64
        mu = rng.random(n) + 0.1
        mu /= mu.sum()
        kappa = rng.standard_normal(n)
        u = rng.standard_normal(n)
        beta = np.sum(kappa * u * mu)
        qm = np.sum(kappa * kappa * mu)
        ok &= beta**2 / qm <= np.sum(u * u * mu) + 1e-12
    check("Hoelder inequality", ok)

    print(f"{'OK' if failures == 0 else 'FAILED'}: "
          f"{failures} failure(s)")
    return 0 if failures == 0 else 3


def make_parser():
    p = argparse.ArgumentParser(
        prog="msldp",
        description="Homogenization, large-deviations rates, and importance "
                    "sampling for multiscale diffusions")
    p.add_argument("--threads", type=int, default=None,
                   help="cap the Monte Carlo worker pool")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required,
                        help="sections-of-key=value run configuration")
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("homogenize", help="(x, r, q) table on an x-lattice")
    common(sp)
    sp.add_argument("--x", default=None, help="lattice override: list or lo:hi:count")

    sp = sub.add_parser("rate", help="local rate values at (x, beta)")
    common(sp)
    sp.add_argument("--regime", type=int, required=True, choices=(1, 2, 3))
    sp.add_argument("--beta", required=True, help="comma-separated velocities")
    sp.add_argument("--x", default=None)

    sp = sub.add_parser("path", help="minimize the action functional")
    common(sp)
    sp.add_argument("--target", default=None, help="fixed endpoint")

    sp = sub.add_parser("simulate", help="trajectories + occupation diagnostics")
    common(sp)
    sp.add_argument("--n", type=int, default=None)

    sp = sub.add_parser("mc", help="Laplace-functional Monte Carlo")
    common(sp)
    sp.add_argument("--scheme", choices=("standard", "is", "both"),
                    default="standard")
    sp.add_argument("--eps", type=float, default=None)
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("selftest", help="run the analytic-oracle suite")
    common(sp, config_required=False)
    return p


def _join_negative_values(argv):
    """Let '--x -1,0,1' parse: glue values starting with a negative number."""
    out = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok in ("--x", "--beta", "--target") and i + 1 < len(argv):
            nxt = argv[i + 1]
            if nxt.startswith("-") and len(nxt) > 1 and (nxt[1].isdigit()
                                                         or nxt[1] == "."):
                out.append(f"{tok}={nxt}")
                i += 2
                continue
        out.append(tok)
        i += 1
    return out


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    args = make_parser().parse_args(_join_negative_values(list(argv)))
    try:
        if getattr(args, "config", None):
            sections = load_config(args.config)
        else:
            sections = {"model": {"dim": 1, "b": "0", "c": "0", "sigma": "1",
                                  "a": 2, "kappa": 1, "x0": 0}}
        overrides = {}
        for flag, key in (("eps", "eps"), ("n", "n"), ("seed", "seed"),
                          ("threads", "threads"), ("out", "out_dir")):
            if getattr(args, flag, None) is not None:
                overrides[key] = getattr(args, flag)
        cfg = RunConfig.from_sections(sections, overrides)
        handler = {"homogenize": cmd_homogenize, "rate": cmd_rate,
                   "path": cmd_path, "simulate": cmd_simulate,
                   "mc": cmd_mc, "selftest": cmd_selftest}[args.command]
        return handler(args, cfg)
    except (ConfigError, ExprError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except MsldpError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
