"""Penalised 2D-3C Navier-Stokes problem on one stream surface.

The unknowns are the three contravariant velocity components ``w^i`` and the
pressure ``p`` on the parameter domain ``D`` of the surface ``xi = xi_k``.
Transverse derivatives are replaced by central quotients built from the
neighbouring surfaces, which enter as data.  The momentum equation is tested
in covariant form (lowered with ``g_ik``) against the measure ``r dx``:

    nu (r g_ik d_l w^k, d_l v^i) + (r c^l_ik d_l w^k, v^i) + (r z_ik w^k, v^i)
        - (r p, div2 v) = (r F_i, v^i) + <r h_i, v^i>_{in,out}
    -(r div2 w, q) - eta (r p, q) = -(r d_tau, q)

with ``div2 v = d_a v^a + v^2 / r``.  The nonlinearity is linearised by
Picard (frozen advecting field) or Newton.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import geometry as geo
from .errors import LinearSolveFailure, NonConvergence
from .fem import (
    ElementData,
    Space,
    at_quadrature,
    boundary_data,
    element_data,
    reference_basis,
    scatter_matrix,
    scatter_vector,
    triangle_quadrature,
)

log = logging.getLogger(__name__)

_E = np.eye(3)


# ---------------------------------------------------------------------------
# transverse quotients


def difference_ops(w_minus, w_k, w_plus, tau):
    """Central quotients ``(d1, d2, d2_tilde)`` at an interior surface."""
    w_minus, w_k, w_plus = (np.asarray(a, float) for a in (w_minus, w_k, w_plus))
    d1 = (w_plus - w_minus) / (2 * tau)
    d2t = (w_plus + w_minus) / tau**2
    return d1, d2t - 2 * w_k / tau**2, d2t


def blade_difference_ops(side, p_blade, p_in1, p_ghost, tau):
    """One-sided quotients at a blade face ``xi = side`` (side = -1 or +1).

    ``p_in1`` is the first interior surface next to the face and ``p_ghost``
    the value used beyond the face (the opposite face under the blade
    identification).  Returns ``(d, d2, d2_tilde)``; ``d`` is the outward
    one-sided first quotient oriented along ``+xi``.
    """
    p_blade, p_in1, p_ghost = (np.asarray(a, float) for a in (p_blade, p_in1, p_ghost))
    d = (p_in1 - p_blade) / tau if side < 0 else (p_blade - p_in1) / tau
    d2t = (p_in1 + p_ghost) / tau**2
    return d, d2t - 2 * p_blade / tau**2, d2t


# ---------------------------------------------------------------------------
# geometry cache


@dataclass
class LayerGeometry:
    """Geometric coefficients at the quadrature points of one mesh.

    Shared by every surface of a stack, since the coefficients do not depend
    on ``xi``.
    """

    shape: geo.BladeShape
    vspace: Space
    pspace: Space
    order: int
    ed: ElementData
    pphi: np.ndarray
    pdphi: np.ndarray
    r: np.ndarray
    g: np.ndarray
    gc: np.ndarray
    dg: np.ndarray
    G: np.ndarray
    P: np.ndarray
    q: np.ndarray
    K: np.ndarray
    R: np.ndarray
    hT: np.ndarray
    bnd: tuple
    bnd_g: np.ndarray

    @property
    def x(self):
        return self.ed.x


def layer_geometry(shape, vspace: Space, pspace: Space, order=None):
    order = order or 2 * vspace.degree + 2
    ed = element_data(vspace, order)
    pts = triangle_quadrature(order).points
    pphi, pref = reference_basis(pspace.degree, pts)
    pdphi = np.einsum("qlk,tkd->tqld", pref, pspace.jinv)
    x = ed.x
    g, gc, _ = geo.space_metric(shape, x)
    _, P, q = geo.vector_laplacian_coefficients(shape, x)
    bnd = boundary_data(vspace, ("inlet", "outlet"), order)
    bnd_g = geo.space_metric(shape, bnd[0])[0] if len(bnd[0]) else np.zeros((0, 0, 3, 3))
    hT = np.sqrt(2 * vspace.det)[:, None] * np.ones(x.shape[1])[None]
    return LayerGeometry(
        shape, vspace, pspace, order, ed, pphi, pdphi, x[..., 1], g, gc,
        geo.metric_derivative(shape, x), geo.christoffel(shape, x), P, q,
        geo.coriolis_matrix(shape, x), geo.centrifugal(shape, x), hT, bnd, bnd_g,
    )


# ---------------------------------------------------------------------------
# problem data


@dataclass
class LayerProblem:
    geom: LayerGeometry
    nu: float = 1.0
    tau: float = 0.5
    eta: float = 1e-6
    xi: float = 0.0
    k: int = 0
    w_minus: Optional[np.ndarray] = None  # (3, nv) neighbour coefficients
    w_plus: Optional[np.ndarray] = None
    p_minus: Optional[np.ndarray] = None  # (np,)
    p_plus: Optional[np.ndarray] = None
    forcing: Optional[Callable] = None  # x -> contravariant (..., 3)
    load: Optional[Callable] = None  # x -> covariant (..., 3)
    traction: Optional[Callable] = None  # (x, normal) -> covariant (..., 3)
    dirichlet: Optional[Callable] = None  # x -> (..., 3) on solid walls
    div_source: Optional[Callable] = None  # x -> (...,), replaces d_tau
    transverse: bool = True
    centrifugal: bool = True
    stabilization: Optional[float] = None  # pressure-gradient penalty for equal order

    def __post_init__(self):
        if not (self.tau > 0 and self.eta > 0 and self.nu > 0):
            raise ValueError("tau, eta and nu must be positive")
        if self.stabilization is None:
            self.stabilization = 0.0 if self.geom.vspace.degree > self.geom.pspace.degree else 0.05


@dataclass
class IterationPolicy:
    scheme: str = "picard"  # or "newton": Picard then Newton
    max_iterations: int = 50
    tol: float = 1e-10
    damping: float = 1.0
    newton_switch: float = 1e-2
    max_halvings: int = 4


@dataclass
class LayerState:
    k: int
    xi: float
    w: np.ndarray  # (3, nv)
    p: np.ndarray  # (np,)
    iterations: int = 0
    converged: bool = True
    history: list = field(default_factory=list)


def _quad(geom: LayerGeometry, coeffs, pressure=False):
    """Values and gradients at quadrature points with components last."""
    if pressure:
        c = np.asarray(coeffs)[geom.pspace.cell_dofs]
        return np.einsum("tl,ql->tq", c, geom.pphi), np.einsum("tl,tqld->tqd", c, geom.pdphi)
    v, gr = at_quadrature(geom.vspace, coeffs, geom.ed)
    return np.moveaxis(v, 0, -1), np.moveaxis(gr, 0, -2)


def coupling_source(problem: LayerProblem):
    """Neighbour contributions at quadrature points.

    Returns a dict with ``load`` (covariant momentum load from the transverse
    quotients, per unit ``r``), ``d1w`` (central quotient of the velocity),
    ``d_tau`` (divergence datum) and ``d1p``.
    """
    g = problem.geom
    shp = g.r.shape
    zero3 = np.zeros(shp + (3,))
    out = {"load": zero3.copy(), "d1w": zero3.copy(), "d_tau": np.zeros(shp), "d1p": np.zeros(shp)}
    if problem.transverse:
        tau, nu = problem.tau, problem.nu
        wm = _quad(g, problem.w_minus) if problem.w_minus is not None else (zero3, np.zeros(shp + (3, 2)))
        wp = _quad(g, problem.w_plus) if problem.w_plus is not None else (zero3, np.zeros(shp + (3, 2)))
        d1w = (wp[0] - wm[0]) / (2 * tau)
        d1w_grad = (wp[1] - wm[1]) / (2 * tau)
        g33 = g.gc[..., 2, 2]
        lap = (
            g33[..., None] * (wp[0] + wm[0]) / tau**2
            + 2 * np.einsum("...b,...kb->...k", g.gc[..., 2, :2], d1w_grad)
            + np.einsum("...km,...m->...k", g.P[..., :, 2, :], d1w)
        )
        out["load"] = nu * np.einsum("...ik,...k->...i", g.g, lap)
        out["d1w"] = d1w
        out["d_tau"] = -d1w[..., 2]
        if problem.p_minus is not None and problem.p_plus is not None:
            out["d1p"] = (_quad(g, problem.p_plus, True)[0] - _quad(g, problem.p_minus, True)[0]) / (2 * tau)
    if problem.div_source is not None:
        out["d_tau"] = np.asarray(problem.div_source(g.x), float) + 0 * g.r
    return out


# ---------------------------------------------------------------------------
# assembly


@dataclass
class LayerSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    nv: int
    npr: int
    fixed: np.ndarray
    fixed_values: np.ndarray


def _coefficients(problem: LayerProblem, w_old, newton, src):
    g = problem.geom
    nu, r = problem.nu, g.r
    wv, wg = _quad(g, w_old)
    G = g.G
    diff = nu * g.g
    first = nu * (np.moveaxis(g.dg, -1, -1) + np.einsum("...ik,l->...ikl", g.g, _E[1, :2]) / r[..., None, None, None])
    first = first - nu * np.einsum("...im,...mlk->...ikl", g.g, g.P[..., :, :2, :])
    first = first + np.einsum("...ik,...l->...ikl", g.g, wv[..., :2])
    inner = -nu * g.q + np.einsum("...mjk,...j->...mk", G, wv) + g.K
    inner = inner + np.einsum("...m,k->...mk", src["d1w"], _E[2])
    if newton:
        inner = inner + np.concatenate([wg, np.zeros(wg.shape[:-1] + (1,))], -1)
        inner = inner + np.einsum("...mkj,...j->...mk", G, wv)
    zero = np.einsum("...im,...mk->...ik", g.g, inner)
    if problem.transverse:
        alpha = 2 * nu * g.gc[..., 2, 2] / problem.tau**2
        zero = zero + alpha[..., None, None] * g.g
    return diff, first, zero, wv, wg


def _products(geom: LayerGeometry):
    """Element products of basis functions, cached on the geometry."""
    cache = geom.__dict__.get("_products")
    if cache is None:
        # built locally and published in one step so concurrent surface solves never see it half filled
        ed = geom.ed
        nt, nq, nl, _ = ed.dphi.shape
        cache = {
            "S": np.einsum("tqad,tqbd->tqab", ed.dphi, ed.dphi).reshape(nt, nq, nl * nl),
            "U": np.einsum("qa,tqbl->tqlab", ed.phi, ed.dphi).reshape(nt, nq * 2, nl * nl),
            "Z": np.einsum("qa,qb->qab", ed.phi, ed.phi).reshape(nq, nl * nl),
        }
        cache = geom.__dict__.setdefault("_products", cache)
    return cache


def _velocity_block(geom: LayerGeometry, W, diff, first, zero):
    pr = _products(geom)
    nt, nq = W.shape
    nl = geom.vspace.nloc
    d = (W[..., None, None] * diff).reshape(nt, nq, 9).transpose(0, 2, 1)
    f = (W[..., None, None, None] * first).transpose(0, 2, 3, 1, 4).reshape(nt, 9, nq * 2)
    z = (W[..., None, None] * zero).reshape(nt, nq, 9).transpose(0, 2, 1)
    A = np.matmul(d, pr["S"]) + np.matmul(f, pr["U"]) + np.matmul(z, pr["Z"])
    return A.reshape(nt, 3, 3, nl, nl).transpose(0, 1, 3, 2, 4)


def _pressure_blocks(g: LayerGeometry, eta, stabilization):
    """Divergence and penalty blocks, cached on the geometry."""
    cache = g.__dict__.setdefault("_pblocks", {})
    key = (float(eta), float(stabilization or 0.0))
    if key in cache:
        return cache[key]
    V, Q = g.vspace, g.pspace
    ed = g.ed
    r = g.r
    W = ed.wdet * r
    Bl = np.zeros((len(W), 1, Q.nloc, 3, V.nloc))
    Bl[:, 0, :, 0, :] = -np.einsum("tq,qa,tqb->tab", W, g.pphi, ed.dphi[..., 0])
    Bl[:, 0, :, 1, :] = -np.einsum("tq,qa,tqb->tab", W, g.pphi, ed.dphi[..., 1] + ed.phi[None] / r[..., None])
    Bmat = scatter_matrix(Q.cell_dofs, V.cell_dofs, Bl, Q.n, V.n)
    Ml = eta * np.einsum("tq,qa,qb->tab", W, g.pphi, g.pphi)
    if stabilization:
        Ml = Ml + stabilization * np.einsum("tq,tq,tqad,tqbd->tab", W, g.hT**2, g.pdphi, g.pdphi)
    Cmat = scatter_matrix(Q.cell_dofs, Q.cell_dofs, Ml[:, None, :, None, :], Q.n, Q.n)
    cache[key] = (Bmat, Cmat)
    return Bmat, Cmat


def _static_part(problem: LayerProblem):
    """Pieces of the system that do not depend on the linearisation point."""
    cache = problem.__dict__.get("_static")
    if cache is not None:
        return cache
    g = problem.geom
    V, Q = g.vspace, g.pspace
    ed = g.ed
    r = g.r
    W = ed.wdet * r
    src = coupling_source(problem)
    Bmat, Cmat = _pressure_blocks(g, problem.eta, problem.stabilization)
    x = g.x
    F = src["load"].copy()
    contra = np.zeros_like(F)
    if problem.forcing is not None:
        contra = contra + np.asarray(problem.forcing(x), float)
    if problem.centrifugal and g.shape.omega:
        contra = contra + g.R
    F = F + np.einsum("...ik,...k->...i", g.g, contra)
    if problem.load is not None:
        F = F + np.asarray(problem.load(x), float)
    F[..., 2] -= src["d1p"]
    fvec = scatter_vector(V.cell_dofs, np.einsum("tq,tqi,qa->tia", W, F, ed.phi), V.n)
    if problem.traction is not None and len(g.bnd[0]):
        bx, bw, bphi, bdofs, bn = g.bnd
        nrm = g.__dict__.setdefault("_bnd_normal", np.broadcast_to(bn[:, None, :], bx.shape))
        h = np.asarray(problem.traction(bx, nrm), float)
        fvec = fvec + scatter_vector(bdofs, np.einsum("eq,eqi,qa->eia", bw * bx[..., 1], h, bphi), V.n)
    gl = -np.einsum("tq,tq,qa->ta", W, src["d_tau"], g.pphi)
    gvec = scatter_vector(Q.cell_dofs, gl[:, None, :], Q.n)
    fixed = V.boundary_dofs("solid")
    fixed_all = np.concatenate([fixed + c * V.n for c in range(3)])
    if problem.dirichlet is not None:
        vals = np.asarray(problem.dirichlet(V.coords[fixed]), float).reshape(len(fixed), 3).T.ravel()
    else:
        vals = np.zeros(len(fixed_all))
    cache = {"src": src, "B": Bmat, "C": Cmat, "f": fvec, "g": gvec, "fixed": fixed_all, "vals": vals, "W": W}
    problem.__dict__["_static"] = cache
    return cache


def assemble_layer(problem: LayerProblem, w_old, newton=False):
    """Linearised saddle system about ``w_old`` (Picard, or Newton if asked)."""
    g = problem.geom
    V, Q = g.vspace, g.pspace
    st = _static_part(problem)
    W = st["W"]
    diff, first, zero, wv, wg = _coefficients(problem, w_old, newton, st["src"])
    Amat = scatter_matrix(V.cell_dofs, V.cell_dofs, _velocity_block(g, W, diff, first, zero), V.n, V.n)
    fvec = st["f"]
    if newton:
        conv = np.einsum("...l,...kl->...k", wv[..., :2], wg) + np.einsum("...kjm,...j,...m->...k", g.G, wv, wv)
        F = np.einsum("...ik,...k->...i", g.g, conv)
        fvec = fvec + scatter_vector(V.cell_dofs, np.einsum("tq,tqi,qa->tia", W, F, g.ed.phi), V.n)
    K = sp.bmat([[Amat, st["B"].T], [st["B"], -st["C"]]], format="csr")
    return LayerSystem(K, np.concatenate([fvec, st["g"]]), V.n, Q.n, st["fixed"], st["vals"])


def solve_system(system: LayerSystem):
    """Solve with essential rows eliminated; returns the full vector."""
    n = system.matrix.shape[0]
    free = np.setdiff1d(np.arange(n), system.fixed)
    x = np.zeros(n)
    x[system.fixed] = system.fixed_values
    K = system.matrix
    b = system.rhs[free] - K[free][:, system.fixed] @ system.fixed_values
    try:
        sol = spla.splu(K[free][:, free].tocsc()).solve(b)
    except RuntimeError as exc:  # singular factor
        raise LinearSolveFailure(str(exc)) from exc
    if not np.all(np.isfinite(sol)):
        raise LinearSolveFailure("non-finite solution")
    x[free] = sol
    return x


def _residual(system: LayerSystem, x):
    free = np.setdiff1d(np.arange(len(x)), system.fixed)
    res = system.matrix @ x - system.rhs
    return float(np.linalg.norm(res[free])), float(np.linalg.norm(system.rhs[free]))


def split(x, nv, npr):
    return x[: 3 * nv].reshape(3, nv), x[3 * nv :]


def solve_layer(problem: LayerProblem, policy: IterationPolicy = None, initial: LayerState = None):
    """Nonlinear layer solve by damped Picard iteration, optionally Newton."""
    policy = policy or IterationPolicy()
    g = problem.geom
    nv, npr = g.vspace.n, g.pspace.n
    if initial is not None:
        x = np.concatenate([initial.w.ravel(), initial.p])
    else:
        x = np.zeros(3 * nv + npr)
    newton = False
    sysm = assemble_layer(problem, split(x, nv, npr)[0], newton)
    x[sysm.fixed] = sysm.fixed_values
    res, _ = _residual(sysm, x)
    history = []
    converged = False
    it = 0
    for it in range(1, policy.max_iterations + 1):
        y = solve_system(sysm)
        theta = policy.damping
        for _ in range(policy.max_halvings + 1):
            xn = x + theta * (y - x)
            nsys = assemble_layer(problem, split(xn, nv, npr)[0], newton)
            resn, scale = _residual(nsys, xn)
            if resn <= res * (1 + 1e-10) or resn <= 1e-12 * max(scale, 1.0):
                break
            theta *= 0.5
        else:
            state = LayerState(problem.k, problem.xi, *split(xn, nv, npr), it, False, history)
            raise NonConvergence(f"layer {problem.k}: residual increase after damping", state, history)
        incr = float(np.linalg.norm(xn - x) / max(np.linalg.norm(xn), 1e-30))
        history.append({"iteration": it, "increment": incr, "residual": resn, "damping": theta, "newton": newton})
        x, sysm, res = xn, nsys, resn
        if incr < policy.tol:
            converged = True
            break
        if policy.scheme == "newton" and not newton and incr < policy.newton_switch:
            newton = True
            sysm = assemble_layer(problem, split(x, nv, npr)[0], True)
            res, _ = _residual(sysm, x)
    w, p = split(x, nv, npr)
    state = LayerState(problem.k, problem.xi, w.copy(), p.copy(), it, converged, history)
    if not converged:
        raise NonConvergence(f"layer {problem.k}: no convergence in {policy.max_iterations} iterations", state, history)
    return state


# ---------------------------------------------------------------------------
# forms used by checks and diagnostics


def a0_matrix(problem: LayerProblem):
    """Velocity block of the viscous form alone (no convection, Coriolis or reaction)."""
    g = problem.geom
    ed = g.ed
    W = ed.wdet * g.r
    A = np.einsum("tq,tqik,tqad,tqbd->tiakb", W, problem.nu * g.g, ed.dphi, ed.dphi)
    V = g.vspace
    return scatter_matrix(V.cell_dofs, V.cell_dofs, A, V.n, V.n)


def trilinear(problem: LayerProblem, w, u, v):
    """``b(w, u, v) = (r g_ik (w^l d_l u^k + Gamma^k_jm w^j u^m), v^i)``."""
    g = problem.geom
    wv, _ = _quad(g, w)
    uv, ug = _quad(g, u)
    vv, _ = _quad(g, v)
    conv = np.einsum("...l,...kl->...k", wv[..., :2], ug) + np.einsum("...kjm,...j,...m->...k", g.G, wv, uv)
    return float(np.sum(g.ed.wdet * g.r * np.einsum("...ik,...k,...i->...", g.g, conv, vv)))


def h1_gram(space: Space, order=None):
    """Block-diagonal H1 Gram matrix for three components (plain ``dx``)."""
    from .fem import mass_matrix, stiffness_matrix

    K = stiffness_matrix(space, order=order) + mass_matrix(space, order=order)
    return sp.block_diag([K, K, K]).tocsr()


def pressure_residual(problem: LayerProblem, state: LayerState):
    """Max-norm of ``eta (r p, q) + (r (div2 w - d_tau), q)`` over the basis."""
    sysm = assemble_layer(problem, state.w)
    nv = sysm.nv
    x = np.concatenate([state.w.ravel(), state.p])
    res = sysm.matrix[3 * nv :] @ x - sysm.rhs[3 * nv :]
    return float(np.max(np.abs(res)))


@dataclass
class SmallnessReport:
    dual_norm: float
    nu: float
    lam: float
    M: float
    bound: float
    margin: float
    satisfied: bool


def smallness_diagnostic(problem: LayerProblem, samples=20, seed=0):
    """Advisory check of ``|F|_* <= nu^2 lam^2 / M`` with discrete constants."""
    g = problem.geom
    V = g.vspace
    nv = V.n
    sysm = assemble_layer(problem, np.zeros((3, nv)))
    free = np.setdiff1d(np.arange(3 * nv), sysm.fixed)
    H = h1_gram(V)[free][:, free].tocsc()
    f = sysm.rhs[: 3 * nv][free]
    dual = float(np.sqrt(max(f @ spla.splu(H).solve(f), 0.0)))
    A0 = a0_matrix(problem)[free][:, free]
    A0 = 0.5 * (A0 + A0.T)
    try:
        lam = float(spla.eigsh(A0.tocsc(), k=1, M=H, sigma=0, which="LM", return_eigenvectors=False)[0]) / problem.nu
    except Exception:  # eigen solver trouble is not fatal for an advisory report
        lam = float("nan")
    rng = np.random.default_rng(seed)
    Mx = 0.0
    for _ in range(samples):
        vecs = []
        for _ in range(3):
            c = np.zeros(3 * nv)
            c[free] = rng.standard_normal(len(free))
            vecs.append((c.reshape(3, nv), np.sqrt(c @ (h1_gram(V) @ c))))
        val = abs(trilinear(problem, vecs[0][0], vecs[1][0], vecs[2][0]))
        Mx = max(Mx, val / (vecs[0][1] * vecs[1][1] * vecs[2][1]))
    bound = problem.nu**2 * lam**2 / Mx if Mx > 0 else float("inf")
    margin = bound - dual
    return SmallnessReport(dual, problem.nu, lam, Mx, bound, margin, bool(margin >= 0))
