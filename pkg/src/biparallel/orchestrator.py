"""Stream-layer decomposition and the bi-parallel sweep.

A sweep solves every interior surface from a read-only snapshot of the
previous sweep (Jacobi), so the surface solves are independent and run on a
thread pool.  After the velocity phase the blade-face and interior pressure
equations are solved, then the jump data are refreshed.
"""

from __future__ import annotations

import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import geometry as geo
from .averaging import average, solve_reduced, xi_derivative
from .errors import BadPartition, InsufficientLayers, NonConvergence
from .fem import Space, at_quadrature, element_data, mass_matrix, stiffness_matrix
from .layer import IterationPolicy, LayerGeometry, LayerProblem, LayerState, layer_geometry, solve_layer, _quad
from .mesh import ParameterDomain, triangulate
from .pressure import (
    PressureGeometry,
    PressureProblem,
    convective_source,
    pressure_geometry,
    solve_blade_pressure,
    solve_interior_pressure,
)

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "biparallel-stack/1: xi[m+1] w[m+1,3,nv] p[m+1,np] p_corr[m+1,np] sweep[] meta(json)"


def partition(m):
    """Uniform partition of [-1, 1] into ``m`` stream layers."""
    if int(m) != m or m < 2:
        raise BadPartition("need at least two stream layers (m >= 2)")
    m = int(m)
    xi = -1.0 + 2.0 * np.arange(m + 1) / m
    xi[-1] = 1.0
    return xi, 2.0 / m


@dataclass
class SolverConfig:
    shape: geo.BladeShape
    domain: ParameterDomain = field(default_factory=ParameterDomain)
    nu: float = 1.0
    eta: float = 1e-6
    h: float = 0.125
    m: int = 4
    degree: int = 2
    quad_order: Optional[int] = None
    policy: IterationPolicy = field(default_factory=lambda: IterationPolicy(tol=1e-11))
    tol: float = 1e-6
    max_sweeps: int = 30
    threads: int = 1
    ordering: str = "jacobi"  # or "gauss-seidel"
    init: str = "zero"  # or "averaged"
    forcing: Optional[Callable] = None  # (x, xi) -> contravariant body force
    traction: Optional[Callable] = None  # (x, normal, xi) -> covariant traction
    dirichlet: Optional[Callable] = None  # (x, xi) -> velocity on the solid walls
    pressure_source: Optional[Callable] = None  # (x, xi) -> S, replaces the convective source
    blade_pressure: str = "extrapolate"  # or "corrected"
    relax: float = 0.5
    ghost: str = "opposite"  # blade identification: "opposite" (p(1)) or "periodic" (p(1 - tau))
    raise_on_stall: bool = False
    acceleration: str = "anderson"  # or "none"
    anderson_depth: int = 5


@dataclass
class StreamLayerStack:
    xi: np.ndarray
    tau: float
    w: np.ndarray  # (m+1, 3, nv); faces stay zero
    p: np.ndarray  # (m+1, np); face rows hold the coupling pressure
    p_corr: np.ndarray  # (m+1, np) pressure-correction solutions
    sweep: int = 0
    history: list = field(default_factory=list)
    jumps: dict = field(default_factory=dict)

    @property
    def m(self):
        return len(self.xi) - 1

    def copy(self):
        return StreamLayerStack(self.xi.copy(), self.tau, self.w.copy(), self.p.copy(), self.p_corr.copy(),
                                self.sweep, list(self.history), dict(self.jumps))


@dataclass
class SweepReport:
    sweep: int
    increments: list
    residuals: list
    seconds: list
    iterations: list
    flagged: list
    max_increment: float


@dataclass
class Context:
    config: SolverConfig
    mesh: object
    vspace: Space
    pspace: Space
    geom: LayerGeometry
    pgeom: PressureGeometry
    h1: object
    pmass: object


def build_context(config: SolverConfig):
    mesh = triangulate(config.domain, config.h)
    V = Space(mesh, config.degree)
    Q = Space(mesh, 1)
    geom = layer_geometry(config.shape, V, Q, config.quad_order)
    pgeom = pressure_geometry(config.shape, Q, geom.order)
    K = stiffness_matrix(V) + mass_matrix(V)
    return Context(config, mesh, V, Q, geom, pgeom, K, mass_matrix(Q))


def empty_stack(ctx: Context):
    xi, tau = partition(ctx.config.m)
    m = len(xi) - 1
    return StreamLayerStack(xi, tau, np.zeros((m + 1, 3, ctx.vspace.n)), np.zeros((m + 1, ctx.pspace.n)),
                            np.zeros((m + 1, ctx.pspace.n)))


def _memo(ctx: Context, key, fn):
    """Sweep-invariant data are evaluated once per surface and reused."""
    cache = ctx.__dict__.setdefault("_memo", {})

    def wrapped(x, *args):
        hit = cache.get(key)
        if hit is not None and hit[0] is x and all(a is b for a, b in zip(hit[1], args)):
            return hit[2]
        val = fn(x, *args)
        cache[key] = (x, args, val)
        return val

    return wrapped


def _layer_problem(ctx: Context, stack: StreamLayerStack, k):
    c = ctx.config
    xi = float(stack.xi[k])
    return LayerProblem(
        ctx.geom, nu=c.nu, tau=stack.tau, eta=c.eta, xi=xi, k=k,
        w_minus=stack.w[k - 1], w_plus=stack.w[k + 1], p_minus=stack.p[k - 1], p_plus=stack.p[k + 1],
        forcing=_memo(ctx, ("f", k), lambda x, xi=xi: c.forcing(x, xi)) if c.forcing else None,
        traction=_memo(ctx, ("t", k), lambda x, n, xi=xi: c.traction(x, n, xi)) if c.traction else None,
        dirichlet=(lambda x, xi=xi: c.dirichlet(x, xi)) if c.dirichlet else None,
    )


def _solve_one(ctx, snapshot, k):
    t0 = time.perf_counter()
    pb = _layer_problem(ctx, snapshot, k)
    init = LayerState(k, pb.xi, snapshot.w[k], snapshot.p[k])
    flagged = False
    try:
        st = solve_layer(pb, ctx.config.policy, init)
    except NonConvergence as exc:
        if exc.state is None or ctx.config.raise_on_stall:
            raise
        st, flagged = exc.state, True
    res = st.history[-1]["residual"] if st.history else 0.0
    return k, st, res, time.perf_counter() - t0, flagged


def extrapolated_faces(p, m):
    """Face pressures from the nearest interior surfaces (exact for quadratics)."""
    if m >= 4:
        lo = 3 * p[1] - 3 * p[2] + p[3]
        hi = 3 * p[m - 1] - 3 * p[m - 2] + p[m - 3]
    elif m == 3:
        lo, hi = 2 * p[1] - p[2], 2 * p[2] - p[1]
    else:
        lo = hi = p[1].copy()
    return lo, hi


def _velocity_source(ctx, stack, k, snapshot_w):
    """Convective pressure source on surface ``k`` at quadrature points."""
    g = ctx.pgeom
    vg = ctx.geom
    w, gw = _quad(vg, snapshot_w[k])
    m = stack.m
    if 0 < k < m:
        wm = _quad(vg, snapshot_w[k - 1])
        wp = _quad(vg, snapshot_w[k + 1])
        dxi = (wp[0] - wm[0]) / (2 * stack.tau)
        dxig = (wp[1] - wm[1]) / (2 * stack.tau)
    else:
        s = 1.0 if k == 0 else -1.0
        k1, k2 = (1, 2) if k == 0 else (m - 1, m - 2)
        a, b = _quad(vg, snapshot_w[k1]), _quad(vg, snapshot_w[k2])
        dxi = s * (4 * a[0] - b[0]) / (2 * stack.tau)
        dxig = s * (4 * a[1] - b[1]) / (2 * stack.tau)
    return convective_source(ctx.config.shape, g.x, w, gw, dxi, dxig)


def _pressure_source(ctx, stack, k):
    c = ctx.config
    if c.pressure_source is not None:
        return c.pressure_source(ctx.pgeom.x, float(stack.xi[k]))
    return _velocity_source(ctx, stack, k, stack.w)


def _inlet_values(ctx, p):
    return lambda pts: p[ctx.pspace.boundary_dofs("inlet")]


def pressure_phase(ctx: Context, stack: StreamLayerStack, prev_corr: np.ndarray, pool=None):
    """Blade-face and interior pressure corrections; returns new p_corr rows."""
    m, tau = stack.m, stack.tau
    c = ctx.config
    corr = prev_corr.copy()
    lo, hi = extrapolated_faces(stack.p, m)
    faces = {0: lo, m: hi}
    if m >= 3:
        def blade(side):
            k = 0 if side < 0 else m
            ints = [prev_corr[1], prev_corr[2]] if side < 0 else [prev_corr[m - 1], prev_corr[m - 2]]
            if c.ghost == "periodic":
                ghost = prev_corr[m - 1] if side < 0 else prev_corr[1]
            else:
                ghost = prev_corr[m] if side < 0 else prev_corr[0]
            return k, solve_blade_pressure(side, ctx.pgeom, tau, ints, ghost, _pressure_source(ctx, stack, k),
                                           dirichlet=_inlet_values(ctx, faces[k]))
        for k, val in map(blade, (-1, 1)):
            corr[k] = val
    else:
        corr[0], corr[m] = lo, hi

    def interior(k):
        pb = PressureProblem(ctx.pgeom, tau, _pressure_source(ctx, stack, k), prev_corr[k - 1], prev_corr[k + 1],
                             dirichlet=_inlet_values(ctx, stack.p[k]))
        return k, solve_interior_pressure(pb)

    jobs = range(1, m)
    results = pool.map(interior, jobs) if pool is not None else map(interior, jobs)
    for k, val in results:
        corr[k] = val
    return corr


def _norm(M, v):
    return float(np.sqrt(max(v @ (M @ v), 0.0)))


def sweep(stack: StreamLayerStack, ctx: Context, pool=None):
    """One bi-parallel sweep; returns the new stack and its report."""
    c = ctx.config
    m = stack.m
    snap = stack.copy()
    new = stack.copy()
    ks = list(range(1, m))
    if c.ordering == "gauss-seidel":
        outs = []
        for k in ks:
            out = _solve_one(ctx, new, k)
            new.w[k], new.p[k] = out[1].w, out[1].p
            outs.append(out)
    else:
        outs = list(pool.map(lambda k: _solve_one(ctx, snap, k), ks)) if pool else [_solve_one(ctx, snap, k) for k in ks]
        outs.sort(key=lambda o: o[0])
        for k, st, *_ in outs:
            new.w[k], new.p[k] = st.w, st.p
    # face pressures used for coupling in the next sweep
    lo, hi = extrapolated_faces(new.p, m)
    new.p_corr = pressure_phase(ctx, new, snap.p_corr, pool)
    if c.blade_pressure == "corrected" and m >= 3:
        lo = snap.p[0] + c.relax * (new.p_corr[0] - snap.p[0]) if stack.sweep else new.p_corr[0]
        hi = snap.p[m] + c.relax * (new.p_corr[m] - snap.p[m]) if stack.sweep else new.p_corr[m]
    new.p[0], new.p[m] = lo, hi
    # jump refresh
    new.jumps = {
        "p": new.p[m] - new.p[0],
        "dxi_w": xi_derivative(new.w, new.tau)[m] - xi_derivative(new.w, new.tau)[0],
    }
    incs = []
    for k in ks:
        dv = (new.w[k] - snap.w[k]).ravel()
        nv = new.w[k].ravel()
        H = _block3(ctx)
        iv = _norm(H, dv) / max(_norm(H, nv), 1e-30)
        ip = _norm(ctx.pmass, new.p[k] - snap.p[k]) / max(_norm(ctx.pmass, new.p[k]), 1e-30)
        incs.append(iv + ip)
    new.sweep = stack.sweep + 1
    rep = SweepReport(new.sweep, incs, [o[2] for o in outs], [o[3] for o in outs], [o[1].iterations for o in outs],
                      [o[0] for o in outs if o[4]], float(max(incs) if incs else 0.0))
    new.history.append(asdict(rep))
    return new, rep


def _block3(ctx):
    if not hasattr(ctx, "_h3"):
        import scipy.sparse as sp

        ctx._h3 = sp.block_diag([ctx.h1] * 3).tocsr()
    return ctx._h3


def initial_stack(ctx: Context):
    stack = empty_stack(ctx)
    c = ctx.config
    if c.init == "averaged":
        xi = stack.xi
        forcing = None
        if c.forcing is not None:
            forcing = lambda x: average(np.stack([c.forcing(x, s) for s in xi]))
        st = solve_reduced(ctx.geom, c.nu, c.eta, forcing, None, c.policy)
        stack.w[1:-1] = st.w
        stack.p[:] = st.p
    elif c.init != "zero":
        raise ValueError(f"unknown initialisation '{c.init}'")
    return stack


class Anderson:
    """Anderson mixing for a fixed-point map ``x -> G(x)`` (type II, windowed).

    Runs serially on the packed state after each sweep, so it does not
    disturb the determinism of the parallel surface solves.
    """

    def __init__(self, depth=5, rcond=1e-10):
        self.depth = depth
        self.rcond = rcond
        self.x = self.f = self.g = None
        self.dF, self.dG = [], []

    def update(self, x, gx):
        f = gx - x
        if self.f is not None:
            self.dF.append(f - self.f)
            self.dG.append(gx - self.g)
            if len(self.dF) > self.depth:
                self.dF.pop(0)
                self.dG.pop(0)
        self.x, self.f, self.g = x, f, gx
        if not self.dF:
            return gx
        F = np.stack(self.dF, 1)
        gamma = np.linalg.lstsq(F, f, rcond=self.rcond)[0]
        return gx - np.stack(self.dG, 1) @ gamma


def _pack(stack: StreamLayerStack):
    return np.concatenate([stack.w[1:-1].ravel(), stack.p.ravel()])


def _unpack(stack: StreamLayerStack, x):
    nw = stack.w[1:-1].size
    stack.w[1:-1] = x[:nw].reshape(stack.w[1:-1].shape)
    stack.p[:] = x[nw:].reshape(stack.p.shape)


def run(config: SolverConfig, ctx: Context = None, stack: StreamLayerStack = None):
    """Sweep to convergence; raises NonConvergence (with the stack) if the budget runs out."""
    ctx = ctx or build_context(config)
    stack = stack or initial_stack(ctx)
    reports = []
    workers = max(1, int(config.threads))
    if config.acceleration not in ("anderson", "none"):
        raise ValueError(f"unknown acceleration '{config.acceleration}'")
    acc = Anderson(config.anderson_depth) if config.acceleration == "anderson" else None
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for _ in range(config.max_sweeps):
            x_in = _pack(stack)
            stack, rep = sweep(stack, ctx, pool if workers > 1 else None)
            reports.append(rep)
            log.info("sweep %d: max increment %.3e", rep.sweep, rep.max_increment)
            if rep.max_increment < config.tol:
                return stack, reports, ctx
            if acc is not None:
                _unpack(stack, acc.update(x_in, _pack(stack)))
    raise NonConvergence(f"no convergence within {config.max_sweeps} sweeps", stack, reports)


# ---------------------------------------------------------------------------
# diagnostics


def _face_strain(shape, x, dxi_w):
    zeros = np.zeros(dxi_w.shape[:-1] + (3,))
    _, _, e = geo.strain_split(shape, x, zeros, np.zeros(zeros.shape + (2,)), dxi_w)
    return e


def diagnostics(stack: StreamLayerStack, ctx: Context, order=None):
    """Power ``I`` on the blade faces and the dissipation ``J`` of the stack.

    ``I = sum_faces int omega r (t . e_theta) sqrt(a) dx`` with the traction
    ``t = sigma N`` for the fluid stress ``sigma = -p g + 2 nu e`` and ``N``
    the unit normal pointing out of the passage.  ``J`` integrates the
    dissipation function over the passage with volume element ``eps r``.
    """
    c = ctx.config
    shape = c.shape
    V = ctx.vspace
    order = order or ctx.geom.order
    ed = element_data(V, order)
    x = ed.x
    r = x[..., 1]
    m, tau, eps = stack.m, stack.tau, shape.epsilon
    vals, grads = at_quadrature(V, stack.w, ed)
    vals = np.moveaxis(vals, 1, -1)
    grads = np.moveaxis(grads, 1, -2)
    dxi = xi_derivative(vals, tau)
    wts = np.full(m + 1, tau)
    wts[[0, -1]] *= 0.5
    J = 0.0
    for k in range(m + 1):
        phi = geo.dissipation_density(shape, x, vals[k], grads[k], dxi[k], c.nu)
        J += wts[k] * float(np.sum(ed.wdet * phi * eps * r))
    g, gc, _ = geo.space_metric(shape, x)
    n_con, _ = geo.unit_normal(shape, x)
    _, T, _, _ = shape.derivatives(x)
    a = 1 + r * r * np.sum(T * T, -1)
    e_theta = np.stack([r * T[..., 0], r * T[..., 1], eps * r], -1)  # e_i . e_theta
    from .fem import reference_basis, triangle_quadrature

    qphi, _ = reference_basis(ctx.pspace.degree, triangle_quadrature(order).points)
    I = 0.0
    for k, s in ((0, -1.0), (m, 1.0)):
        k1, k2 = (1, 2) if k == 0 else (m - 1, m - 2)
        d = -s * (4 * vals[k1] - vals[k2]) / (2 * tau)
        e = _face_strain(shape, x, d)
        e_up = np.einsum("...ik,...jl,...kl->...ij", gc, gc, e)
        p = np.einsum("tl,ql->tq", stack.p[k][ctx.pspace.cell_dofs], qphi)
        sigma = -p[..., None, None] * gc + 2 * c.nu * e_up
        N_low = s * np.einsum("...jk,...k->...j", g, n_con)
        t = np.einsum("...ij,...j->...i", sigma, N_low)
        I += float(np.sum(ed.wdet * shape.omega * r * np.einsum("...i,...i->...", t, e_theta) * np.sqrt(a)))
    return I, J


# ---------------------------------------------------------------------------
# checkpoint


def save_checkpoint(stack: StreamLayerStack, path, meta=None):
    buf = io.BytesIO()
    np.savez(
        buf, schema=np.array(CHECKPOINT_SCHEMA), xi=stack.xi, w=stack.w, p=stack.p, p_corr=stack.p_corr,
        sweep=np.array(stack.sweep), meta=np.array(json.dumps(meta or {}, default=str)),
        history=np.array(json.dumps(stack.history, default=float)),
    )
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as f:
        schema = str(f["schema"])
        if schema != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema: {schema}")
        xi = f["xi"]
        st = StreamLayerStack(xi, 2.0 / (len(xi) - 1), f["w"], f["p"], f["p_corr"], int(f["sweep"]),
                              json.loads(str(f["history"])))
        return st, json.loads(str(f["meta"]))
