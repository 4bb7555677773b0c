"""Two-level solver for one layer problem.

A nonlinear solve on a coarse mesh ``h`` is followed by a single linear
Newton solve on a nested fine mesh ``h*``, linearised about the interpolated
coarse velocity:

    A(w_h; u, v) = A0(u, v) + b(u, w_h, v) + b(w_h, u, v)
    A(w_h; w*, v) = (F, v) + b(w_h, w_h, v)

With coarse degree ``k`` and fine degree ``m`` the balanced fine size is
``h* = h^((2k + 1) / (m + 1))``.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse.linalg as spla

from .errors import SingularLinearization
from .fem import Space, norms
from .layer import (
    IterationPolicy,
    LayerProblem,
    LayerState,
    _residual,
    assemble_layer,
    h1_gram,
    layer_geometry,
    solve_layer,
    solve_system,
    split,
    trilinear,
)
from .mesh import ParameterDomain, Triangulation, refine, triangulate

log = logging.getLogger(__name__)


@dataclass
class TwoLevelPlan:
    h: float
    h_fine: float
    factor: int
    coarse_degree: int
    fine_degree: int
    coarse_mesh: Triangulation
    fine_mesh: Triangulation

    def transfer(self, coarse: Space, fine: Space, coeffs):
        """Interpolate a coarse FE function into the fine space (exact on nested meshes)."""
        return np.atleast_2d(coarse.evaluate(coeffs, fine.coords))


def balanced_fine_size(h, k=1, m=1):
    return h ** ((2 * k + 1) / (m + 1))


def make_plan(h, k=1, m=1, domain: ParameterDomain = None, h_fine=None):
    """Coarse and nested fine meshes; the refinement factor is rounded up."""
    domain = domain or ParameterDomain()
    target = h_fine if h_fine is not None else min(balanced_fine_size(h, k, m), h)
    if not 0 < target <= h:
        raise ValueError("fine mesh size must lie in (0, h]")
    factor = max(1, math.ceil(h / target - 1e-9))
    coarse = triangulate(domain, h)
    fine = refine(coarse, factor)
    return TwoLevelPlan(h, h / factor, factor, k, m, coarse, fine)


@dataclass
class LayerCase:
    """Mesh-independent description of one layer problem.

    Neighbour data are given as functions and interpolated into whichever
    space the problem is built on.  ``exact`` optionally carries
    ``(velocity, velocity_grad, pressure)`` for error measurement.
    """

    shape: object
    nu: float = 1.0
    tau: float = 0.25
    eta: float = 1e-8
    xi: float = 0.0
    forcing: Optional[Callable] = None
    traction: Optional[Callable] = None
    dirichlet: Optional[Callable] = None
    div_source: Optional[Callable] = None
    w_minus: Optional[Callable] = None
    w_plus: Optional[Callable] = None
    p_minus: Optional[Callable] = None
    p_plus: Optional[Callable] = None
    exact: Optional[tuple] = None
    pressure_degree: Optional[int] = None

    def spaces(self, mesh: Triangulation, degree):
        pdeg = self.pressure_degree or max(1, degree - 1)
        return Space(mesh, degree), Space(mesh, pdeg)

    def problem(self, mesh: Triangulation, degree) -> LayerProblem:
        V, Q = self.spaces(mesh, degree)
        geom = layer_geometry(self.shape, V, Q)
        ip = lambda sp_, fn: None if fn is None else sp_.interpolate(fn)
        return LayerProblem(
            geom, nu=self.nu, tau=self.tau, eta=self.eta, xi=self.xi,
            w_minus=ip(V, self.w_minus), w_plus=ip(V, self.w_plus),
            p_minus=ip(Q, self.p_minus), p_plus=ip(Q, self.p_plus),
            forcing=self.forcing, traction=self.traction, dirichlet=self.dirichlet,
            div_source=self.div_source,
        )

    def errors(self, problem: LayerProblem, w, p):
        """``(H1 velocity error, L2 pressure error)`` against the exact fields."""
        if self.exact is None:
            return float("nan"), float("nan")
        vel, grad, pres = self.exact
        g = problem.geom
        ew = norms(g.vspace, w, vel, grad).h1
        ep = norms(g.pspace, p, pres).l2
        return ew, ep


def manufactured_case(man, shape, nu=1.0, xi=0.25, tau=0.25, eta=1e-8, pressure_degree=None):
    """Layer case whose semi-discrete exact solution is ``man`` restricted to ``xi``."""
    from . import manufactured as mf

    d2 = mf.divergence_2d(man, xi)
    pex = man.pressure(xi)
    return LayerCase(
        shape, nu, tau, eta, xi,
        forcing=mf.layer_forcing(man, shape, nu, xi, tau),
        traction=mf.traction(man, shape, nu, xi),
        dirichlet=man.velocity(xi),
        div_source=lambda x: d2(x) + eta * pex(x),
        w_minus=man.velocity(xi - tau), w_plus=man.velocity(xi + tau),
        p_minus=man.pressure(xi - tau), p_plus=man.pressure(xi + tau),
        exact=(man.velocity(xi), man.velocity_grad(xi), pex),
        pressure_degree=pressure_degree,
    )


# ---------------------------------------------------------------------------
# linearisation checks


def _free(system):
    return np.setdiff1d(np.arange(system.matrix.shape[0]), system.fixed)


def inf_sup_estimate(system, gram=None, iterations=30, seed=0):
    """Smallest singular value of the (scaled) linearised operator on free dofs.

    Inverse power iteration on ``K^T K`` with a sparse LU of ``K``; with
    ``gram`` the unknowns are first scaled by the square root of its diagonal.
    """
    free = _free(system)
    K = system.matrix[free][:, free].tocsc()
    if gram is not None:
        d = np.ones(K.shape[0])
        nv3 = 3 * system.nv
        gd = np.sqrt(np.abs(gram.diagonal()))
        mask = free < nv3
        d[mask] = gd[free[mask]]
        S = 1.0 / d
        K = (K.multiply(S[:, None]).multiply(S[None, :])).tocsc()
    try:
        lu = spla.splu(K)
    except RuntimeError:
        return 0.0
    x = np.random.default_rng(seed).standard_normal(K.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iterations):
        y = lu.solve(lu.solve(x, trans="T"))
        nrm = np.linalg.norm(y)
        if not np.isfinite(nrm) or nrm == 0:
            return 0.0
        lam_new = nrm
        x = y / nrm
        if abs(lam_new - lam) <= 1e-6 * lam_new:
            lam = lam_new
            break
        lam = lam_new
    return float(1.0 / math.sqrt(lam)) if lam > 0 else 0.0


def nonsingularity_indicator(problem: LayerProblem, w, alpha, samples=6, seed=0):
    """``2 M alpha^-1 |w|_1 h``; values below one indicate the coarse solution is isolated."""
    V = problem.geom.vspace
    G = h1_gram(V)
    rng = np.random.default_rng(seed)
    M = 0.0
    for _ in range(samples):
        vs = [rng.standard_normal((3, V.n)) for _ in range(3)]
        n = [math.sqrt(v.ravel() @ (G @ v.ravel())) for v in vs]
        M = max(M, abs(trilinear(problem, *vs)) / (n[0] * n[1] * n[2]))
    wn = math.sqrt(np.asarray(w).ravel() @ (G @ np.asarray(w).ravel()))
    return 2 * M * wn * V.mesh.h / alpha if alpha > 0 else float("inf")


def frechet_check(problem: LayerProblem, w, p, direction=None, steps=(1e-2, 1e-3, 1e-4), seed=0):
    """Compare the Newton matrix with difference quotients of the nonlinear residual.

    The nonlinear residual is ``R(x) = K(w) x - f`` with the Picard matrix.
    Returns the relative discrepancy for each step; it should fall like the step.
    """
    nv, npr = problem.geom.vspace.n, problem.geom.pspace.n
    x = np.concatenate([np.asarray(w, float).ravel(), np.asarray(p, float)])
    if direction is None:
        direction = np.random.default_rng(seed).standard_normal(len(x))
    jac = assemble_layer(problem, w, newton=True).matrix @ direction

    def R(y):
        s = assemble_layer(problem, split(y, nv, npr)[0])
        return s.matrix @ y - s.rhs

    r0 = R(x)
    out = []
    for s in steps:
        fd = (R(x + s * direction) - r0) / s
        out.append(float(np.linalg.norm(fd - jac) / max(np.linalg.norm(jac), 1e-300)))
    return out


# ---------------------------------------------------------------------------
# the two stages


@dataclass
class CoarseResult:
    problem: LayerProblem
    state: LayerState
    alpha: float
    indicator: float
    seconds: float


@dataclass
class FineResult:
    problem: LayerProblem
    w: np.ndarray
    p: np.ndarray
    residual_fine: float
    residual_coarse: float
    alpha: float
    seconds: float


def coarse_solve(case: LayerCase, plan: TwoLevelPlan, policy: IterationPolicy = None, gate=True):
    """Nonlinear solve on the coarse mesh with an advisory nonsingularity estimate."""
    t0 = time.perf_counter()
    pb = case.problem(plan.coarse_mesh, plan.coarse_degree)
    st = solve_layer(pb, policy)
    alpha = indicator = float("nan")
    if gate:
        sysm = assemble_layer(pb, st.w, newton=True)
        alpha = inf_sup_estimate(sysm, h1_gram(pb.geom.vspace))
        indicator = nonsingularity_indicator(pb, st.w, alpha)
        log.info("coarse h=%g: alpha=%.3e indicator=%.3e", plan.h, alpha, indicator)
    return CoarseResult(pb, st, alpha, indicator, time.perf_counter() - t0)


def fine_one_step_newton(coarse: CoarseResult, plan: TwoLevelPlan, case: LayerCase,
                         alpha_floor=1e-10, check=True):
    """Single linear solve on the fine mesh, linearised about the coarse velocity."""
    t0 = time.perf_counter()
    pb = case.problem(plan.fine_mesh, plan.fine_degree)
    V = pb.geom.vspace
    wh = plan.transfer(coarse.problem.geom.vspace, V, coarse.state.w)
    sysm = assemble_layer(pb, wh, newton=True)
    alpha = float("nan")
    if check:
        alpha = inf_sup_estimate(sysm)
        if not alpha > alpha_floor:
            raise SingularLinearization(f"linearised operator nearly singular (estimate {alpha:.3e})")
    x = solve_system(sysm)
    w, p = split(x, V.n, pb.geom.pspace.n)
    res_f, scale = _residual(assemble_layer(pb, w), x)
    res_c, scale_c = _residual(assemble_layer(coarse.problem, coarse.state.w),
                               np.concatenate([coarse.state.w.ravel(), coarse.state.p]))
    return FineResult(pb, w, p, res_f / max(scale, 1e-300), res_c / max(scale_c, 1e-300), alpha,
                      time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# convergence study


@dataclass
class LevelRow:
    h: float
    h_fine: float
    coarse_h1: float
    coarse_l2p: float
    two_level_h1: float
    two_level_l2p: float
    direct_h1: float = float("nan")
    direct_l2p: float = float("nan")
    coarse_iterations: int = 0
    direct_iterations: int = 0
    two_level_seconds: float = 0.0
    direct_seconds: float = float("nan")
    alpha: float = float("nan")
    indicator: float = float("nan")


@dataclass
class StudyResult:
    rows: list
    slopes: dict = field(default_factory=dict)


def fit_slope(hs, errs):
    """Least-squares slope of ``log err`` against ``log h``; nan if saturated."""
    hs, errs = np.asarray(hs, float), np.asarray(errs, float)
    ok = np.isfinite(errs) & (errs > 1e-13)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(hs[ok]), np.log(errs[ok]), 1)[0])


def run_level(case: LayerCase, h, k=1, m=1, domain=None, policy=None, direct=True, h_fine=None):
    plan = make_plan(h, k, m, domain, h_fine)
    co = coarse_solve(case, plan, policy)
    fi = fine_one_step_newton(co, plan, case)
    ch1, cl2 = case.errors(co.problem, co.state.w, co.state.p)
    th1, tl2 = case.errors(fi.problem, fi.w, fi.p)
    row = LevelRow(h, plan.h_fine, ch1, cl2, th1, tl2, coarse_iterations=co.state.iterations,
                   two_level_seconds=co.seconds + fi.seconds, alpha=co.alpha, indicator=co.indicator)
    if direct:
        t0 = time.perf_counter()
        pb = fi.problem
        st = solve_layer(pb, policy)
        row.direct_seconds = time.perf_counter() - t0
        row.direct_h1, row.direct_l2p = case.errors(pb, st.w, st.p)
        row.direct_iterations = st.iterations
    return row


def convergence_study(case: LayerCase, ladder: Sequence[float], k=1, m=1, domain=None,
                      policy=None, direct=True, threads=1):
    """Errors, iteration counts and slopes over a ladder of coarse sizes.

    Levels are independent and run concurrently under ``threads`` workers;
    rows are returned in ladder order.
    """
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rows = list(pool.map(lambda h: run_level(case, h, k, m, domain, policy, direct), ladder))
    hs = [r.h for r in rows]
    slopes = {
        "coarse_h1": fit_slope(hs, [r.coarse_h1 for r in rows]),
        "coarse_l2p": fit_slope(hs, [r.coarse_l2p for r in rows]),
        "two_level_h1": fit_slope(hs, [r.two_level_h1 for r in rows]),
        "direct_h1": fit_slope(hs, [r.direct_h1 for r in rows]),
    }
    return StudyResult(rows, slopes)
