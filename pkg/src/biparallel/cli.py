"""Batch command line front end.

Subcommands: run, geometry-check, convergence-study, pressure-surface,
average.  Any failure prints a JSON error object on stderr and exits
non-zero (2 for configuration errors, 3 for non-convergence, 1 otherwise).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from . import __version__
from . import config as cfgmod
from . import geometry as geo
from . import io
from .errors import BiparallelError, NonConvergence, ParseError, ValidationError

log = logging.getLogger("biparallel")

IDENTITY_TOL = 1e-12
ORACLE_TOL = 1e-6


# ---------------------------------------------------------------------------
# config -> solver objects


def build_shape(cfg):
    g, ph = cfg["geometry"], cfg["physics"]
    n, om = ph["n_blades"], ph["omega"]
    if g["preset"] == "flat":
        return geo.flat(n, om)
    if g["preset"] == "sampled":
        return geo.sampled(g["path"], n, om)
    if g["preset"] == "expression":
        return geo.shape_from_expression(g["expression"], n, om)
    return geo.preset(g["preset"], c=g["c"], n_blades=n, omega=om)


def build_domain(cfg):
    from .mesh import ParameterDomain

    d = cfg["domain"]
    return ParameterDomain(tuple(d["z_range"]), tuple(d["r_range"]))


def manufactured_field(cfg):
    from .manufactured import solenoidal_field

    c = cfg["case"]
    return solenoidal_field(c["amp_psi"], c["amp_phi"], r_range=tuple(cfg["domain"]["r_range"]))


def physical_traction(cfg):
    """Inlet traction ``-p0 n``; the outlet is traction free."""
    p0 = cfg["case"]["inlet_pressure"]
    z0 = cfg["domain"]["z_range"][0]

    def h(x, n, xi):
        on_inlet = np.isclose(np.asarray(x)[..., 0], z0)
        out = np.zeros(np.shape(x)[:-1] + (3,))
        out[..., :2] = -p0 * np.asarray(n) * on_inlet[..., None]
        return out

    return h


def solver_config(cfg, shape=None):
    from . import manufactured as mf
    from .layer import IterationPolicy
    from .orchestrator import SolverConfig

    shape = shape or build_shape(cfg)
    d, it = cfg["discretization"], cfg["iteration"]
    nu = cfg["physics"]["nu"]
    kw = {}
    if cfg["case"]["kind"] == "manufactured":
        man = manufactured_field(cfg)
        kw["forcing"] = lambda x, xi: mf.forcing_3d(man, shape, nu, xi)(x)
        kw["traction"] = lambda x, n, xi: mf.traction(man, shape, nu, xi)(x, n)
    else:
        kw["traction"] = physical_traction(cfg)
    return SolverConfig(
        shape, build_domain(cfg), nu=nu, eta=d["eta"], h=d["h"], m=d["m"],
        degree=2 if d["element"] == "P2-P1" else 1, quad_order=d["quad_order"] or None,
        policy=IterationPolicy(it["scheme"], it["layer_max_iterations"], it["layer_tol"]),
        tol=it["tol"], max_sweeps=it["max_sweeps"], threads=cfg["output"]["threads"],
        ordering=it["ordering"], init=it["init"], blade_pressure=it["blade_pressure"], ghost=it["ghost"],
        acceleration=it["acceleration"], anderson_depth=it["anderson_depth"], **kw,
    )


def load_config(args):
    if args.config:
        cfg = cfgmod.parse_config(args.config)
    else:
        cfg = cfgmod.validate(cfgmod.env_overrides())
    raw = {}
    if getattr(args, "geometry", None):
        raw.setdefault("geometry", {})["preset"] = args.geometry
    if getattr(args, "threads", None):
        raw.setdefault("output", {})["threads"] = args.threads
    if getattr(args, "output_dir", None):
        raw.setdefault("output", {})["directory"] = args.output_dir
    if getattr(args, "tol", None):
        raw.setdefault("iteration", {})["tol"] = args.tol
    if getattr(args, "max_sweeps", None):
        raw.setdefault("iteration", {})["max_sweeps"] = args.max_sweeps
    return cfgmod.validate(cfgmod.merge(cfg, raw)) if raw else cfg


# ---------------------------------------------------------------------------
# emission helpers


def _layer_rows(V, Q, w, p):
    pv = Q.evaluate(p, V.coords)
    return [(i, V.coords[i, 0], V.coords[i, 1], w[0, i], w[1, i], w[2, i], pv[i]) for i in range(V.n)]


LAYER_HEADER = ["dof", "z", "r", "w1", "w2", "w3", "p"]


def _emit_stack(man, stack, ctx, cfg):
    V, Q = ctx.vspace, ctx.pspace
    for k, xi in enumerate(stack.xi):
        f = io.write_csv(man.path(f"layer_{k:03d}.csv"), LAYER_HEADER, _layer_rows(V, Q, stack.w[k], stack.p[k]))
        man.add(f, "layer-csv")
        if cfg["output"]["vtk"]:
            pts = np.column_stack([V.coords, np.full(V.n, xi)])
            pv = Q.evaluate(stack.p[k], V.coords)
            f = io.write_vtk(man.path(f"layer_{k:03d}.vtk"), pts, V.cell_dofs,
                             {"velocity": stack.w[k].T, "pressure": pv}, f"surface xi={float(xi)!r}")
            man.add(f, "layer-vtk")


def _stack_errors(stack, ctx, cfg):
    from .fem import norms

    if cfg["case"]["kind"] != "manufactured":
        return None
    mf = manufactured_field(cfg)
    V, Q = ctx.vspace, ctx.pspace
    out = []
    for k in range(1, stack.m):
        xi = float(stack.xi[k])
        out.append({"k": k, "xi": xi,
                    "velocity_h1": norms(V, stack.w[k], mf.velocity(xi), mf.velocity_grad(xi)).h1,
                    "pressure_l2": norms(Q, stack.p[k], mf.pressure(xi)).l2})
    return out


def _solve(cfg):
    from .orchestrator import run

    sc = solver_config(cfg)
    t0 = time.perf_counter()
    try:
        stack, reports, ctx = run(sc)
        err = None
    except NonConvergence as exc:
        from .orchestrator import build_context

        stack, reports, ctx, err = exc.state, exc.history, build_context(sc), exc
    return stack, reports, ctx, err, time.perf_counter() - t0


def _start(cfg):
    man = io.Manifest(cfg["output"]["directory"])
    f = man.path("config.toml")
    f.write_text(cfgmod.dumps(cfg), encoding="utf-8")
    man.add(f, "config")
    return man


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args):
    from .orchestrator import diagnostics

    cfg = load_config(args)
    man = _start(cfg)
    stack, reports, ctx, err, secs = _solve(cfg)
    _emit_stack(man, stack, ctx, cfg)
    man.add(io.write_jsonl(man.path("sweeps.jsonl"), [r.__dict__ for r in reports]), "sweep-log")
    from .mesh import write_mesh

    write_mesh(ctx.mesh, man.path("mesh.txt"))
    man.add(man.path("mesh.txt"), "mesh")
    I, J = diagnostics(stack, ctx)
    diag = {"I": I, "J": J, "sweeps": len(reports), "converged": err is None,
            "final_increment": reports[-1].max_increment if reports else None,
            "errors": _stack_errors(stack, ctx, cfg)}
    man.add(io.write_json(man.path("diagnostics.json"), diag), "diagnostics")
    man.write(command="run", version=__version__, seconds=secs)
    print(io.json.dumps(io._jsonable({"I": I, "J": J, "sweeps": len(reports), "converged": err is None})))
    if err is not None:
        raise err
    return 0


def cmd_pressure_surface(args):
    cfg = load_config(args)
    man = _start(cfg)
    stack, reports, ctx, err, secs = _solve(cfg)
    Q = ctx.pspace
    m = stack.m
    rows = [(i, Q.coords[i, 0], Q.coords[i, 1], stack.p[0][i], stack.p[m][i], stack.p_corr[0][i], stack.p_corr[m][i])
            for i in range(Q.n)]
    f = io.write_csv(man.path("blade_pressure.csv"),
                     ["dof", "z", "r", "p_minus", "p_plus", "p_minus_corrected", "p_plus_corrected"], rows)
    man.add(f, "blade-pressure")
    man.add(io.write_jsonl(man.path("sweeps.jsonl"), [r.__dict__ for r in reports]), "sweep-log")
    man.write(command="pressure-surface", version=__version__, seconds=secs)
    if err is not None:
        raise err
    return 0


def cmd_average(args):
    from . import manufactured as mf
    from .averaging import average, solve_reduced
    from .fem import Space, norms
    from .layer import IterationPolicy, layer_geometry
    from .mesh import triangulate
    from .orchestrator import partition

    cfg = load_config(args)
    man = _start(cfg)
    sc = solver_config(cfg)
    mesh = triangulate(sc.domain, sc.h)
    V, Q = Space(mesh, sc.degree), Space(mesh, 1)
    geom = layer_geometry(sc.shape, V, Q, sc.quad_order)
    xi, _ = partition(sc.m)
    forcing = None
    if sc.forcing is not None:
        forcing = lambda x: average(np.stack([sc.forcing(x, s) for s in xi]))
    t0 = time.perf_counter()
    st = solve_reduced(geom, sc.nu, sc.eta, forcing, None, IterationPolicy(tol=cfg["iteration"]["layer_tol"]))
    rows = _layer_rows(V, Q, st.w, st.p)
    man.add(io.write_csv(man.path("averaged.csv"), LAYER_HEADER, rows), "averaged-csv")
    if cfg["output"]["vtk"]:
        pv = Q.evaluate(st.p, V.coords)
        man.add(io.write_vtk(man.path("averaged.vtk"), V.coords, V.cell_dofs,
                             {"velocity": st.w.T, "pressure": pv}, "averaged"), "averaged-vtk")
    info = {"iterations": st.iterations, "converged": st.converged}
    if cfg["case"]["kind"] == "manufactured":
        field = manufactured_field(cfg)
        wbar = lambda x: average(np.stack([field.velocity(s)(x) for s in xi]))
        info["velocity_l2_vs_mean"] = norms(V, st.w, wbar).l2
    man.add(io.write_json(man.path("averaged.json"), info), "diagnostics")
    man.write(command="average", version=__version__, seconds=time.perf_counter() - t0)
    return 0


def cmd_geometry_check(args):
    from .checks import geometry_report

    cfg = load_config(args)
    shape = build_shape(cfg)
    d = cfg["domain"]
    rep = geometry_report(shape, args.samples, args.seed, tuple(d["z_range"]), tuple(d["r_range"]))
    ok_ident = all(v <= IDENTITY_TOL for v in rep["identities"].values())
    ok_oracle = all(v <= ORACLE_TOL for v in rep["oracle"].values())
    rep["tolerances"] = {"identities": IDENTITY_TOL, "oracle": ORACLE_TOL}
    rep["passed"] = ok_ident and ok_oracle
    if args.output_dir:
        man = _start(cfg)
        man.add(io.write_json(man.path("geometry_check.json"), rep), "report")
        man.write(command="geometry-check", version=__version__)
    print(io.json.dumps(io._jsonable(rep), sort_keys=True))
    return 0 if rep["passed"] else 1


STUDY_HEADER = ["h", "h_fine", "coarse_h1", "coarse_l2p", "two_level_h1", "two_level_l2p", "direct_h1",
                "direct_l2p", "coarse_iterations", "direct_iterations", "two_level_seconds", "direct_seconds"]
LADDER = (4, 6, 8, 12, 16, 24)


def cmd_convergence_study(args):
    from .manufactured import smooth_field
    from .twolevel import convergence_study, fit_slope, manufactured_case

    cfg = load_config(args)
    n = args.ladder
    if not 2 <= n <= len(LADDER):
        raise ValidationError("ladder", f"must be between 2 and {len(LADDER)}")
    man = _start(cfg)
    shape = build_shape(cfg)
    k = 2 if cfg["discretization"]["element"] == "P2-P1" else 1
    case = manufactured_case(smooth_field(cfg["case"]["amp_psi"]), shape, cfg["physics"]["nu"],
                             eta=cfg["discretization"]["eta"], pressure_degree=1)
    hs = [1.0 / c for c in LADDER[:n]]
    t0 = time.perf_counter()
    res = convergence_study(case, hs, k, k, build_domain(cfg), threads=cfg["output"]["threads"])
    rows = [[getattr(r, c) for c in STUDY_HEADER] for r in res.rows]
    man.add(io.write_csv(man.path("rates.csv"), STUDY_HEADER, rows), "rate-table")
    hf = [r.h_fine for r in res.rows]
    slopes = {
        "coarse_h1": {"observed": res.slopes["coarse_h1"], "theory": float(k)},
        "two_level_h1_vs_h_fine": {"observed": fit_slope(hf, [r.two_level_h1 for r in res.rows]), "theory": float(k)},
        "direct_h1_vs_h_fine": {"observed": fit_slope(hf, [r.direct_h1 for r in res.rows]), "theory": float(k)},
    }
    for v in slopes.values():
        v["within_0.3"] = bool(abs(v["observed"] - v["theory"]) <= 0.3)
    srows = [(name, v["observed"], v["theory"], v["within_0.3"]) for name, v in slopes.items()]
    man.add(io.write_csv(man.path("slopes.csv"), ["quantity", "observed", "theory", "within_0.3"], srows), "slopes")
    man.add(io.write_json(man.path("study.json"), {"ladder": hs, "slopes": slopes}), "study")
    man.write(command="convergence-study", version=__version__, seconds=time.perf_counter() - t0)
    print(io.json.dumps(io._jsonable(slopes), sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="biparallel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, geometry=True):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--threads", type=int, help="thread budget")
        sp.add_argument("--output-dir", help="output directory")
        if geometry:
            sp.add_argument("--geometry", help="geometry preset")
        sp.add_argument("--tol", type=float, help="sweep tolerance")
        sp.add_argument("--max-sweeps", type=int, help="sweep budget")
        return sp

    common(sub.add_parser("run", help="full bi-parallel solve")).set_defaults(func=cmd_run)
    common(sub.add_parser("pressure-surface", help="blade pressure tables")).set_defaults(func=cmd_pressure_surface)
    common(sub.add_parser("average", help="averaged reduced solve")).set_defaults(func=cmd_average)
    g = common(sub.add_parser("geometry-check", help="closed forms against the oracle"))
    g.add_argument("--samples", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_geometry_check)
    c = common(sub.add_parser("convergence-study", help="two-level rate tables"))
    c.add_argument("--ladder", type=int, default=3, help="number of mesh levels")
    c.set_defaults(func=cmd_convergence_study)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ParseError, ValidationError) as exc:
        print(io.error_json(exc), file=sys.stderr)
        return 2
    except NonConvergence as exc:
        print(io.error_json(exc), file=sys.stderr)
        return 3
    except (BiparallelError, OSError, ValueError, KeyError) as exc:
        print(io.error_json(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
