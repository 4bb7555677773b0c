"""Surface pressure equations.

Taking the divergence of the momentum equation gives ``-Lap p = S`` with

    S = nabla_i w^j nabla_j w^i + div C - 2 omega^2.

The Laplace-Beltrami operator splits into a membrane part acting on the
surface variables and a transverse part,

    Lap p = (1/r) d_a (r d_a p) - 2/eps Theta_a d_a d_xi p
            - c/eps d_xi p + g^33 d_xi^2 p,          c = Lap~ Theta,

with ``Lap~ Theta = Theta_11 + Theta_22 + Theta_2 / r``.  On interior surfaces
the transverse derivatives become central quotients of the neighbouring
pressures (lagged), leaving a Helmholtz problem.  On the blade faces they
become one-sided quotients with the unknown face pressure kept implicit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import sympy as sp_sym

from . import geometry as geo
from .errors import InsufficientLayers, LinearSolveFailure
from .fem import Space, boundary_data, element_data, scatter_matrix, scatter_vector


# ---------------------------------------------------------------------------
# source


def convective_source(shape, x, w, grad_w, dxi_w, dxi_grad_w=None, include_centrifugal=True):
    """Pointwise source ``nabla_i w^j nabla_j w^i + div C - 2 omega^2``.

    ``grad_w[..., k, a]`` are surface derivatives, ``dxi_w[..., k]`` the
    transverse derivatives (or their quotients) and ``dxi_grad_w[..., k, a]``
    the surface derivatives of ``dxi_w``; the latter enter only through
    ``div C`` and default to zero.
    """
    w = np.asarray(w, float)
    grad_w = np.asarray(grad_w, float)
    dxi_w = np.asarray(dxi_w, float)
    nab, _ = geo.covariant_derivatives(shape, x, w, grad_w, dxi_w)
    conv = np.einsum("...ij,...ji->...", nab, nab)
    r, T, TT, _ = shape.derivatives(x)
    om, eps = shape.omega, shape.epsilon
    # div C = (1/r) d_r (r C^2) + d_xi C^3,  r C^2 = -2 omega r^2 Pi
    Pi = eps * w[..., 2] + np.sum(w[..., :2] * T, -1)
    dr_Pi = eps * grad_w[..., 2, 1] + np.sum(grad_w[..., :2, 1] * T, -1) + np.sum(w[..., :2] * TT[..., :, 1], -1)
    dxi_Pi = eps * dxi_w[..., 2] + np.sum(dxi_w[..., :2] * T, -1)
    divC = -2 * om / r * (2 * r * Pi + r * r * dr_Pi) + 2 * om / eps * (r * T[..., 1] * dxi_Pi + dxi_w[..., 1] / r)
    out = conv + divC
    if include_centrifugal:
        out = out - 2 * om**2
    return out


def lap_theta(shape, x):
    r, T, TT, _ = shape.derivatives(x)
    return TT[..., 0, 0] + TT[..., 1, 1] + T[..., 1] / r


# ---------------------------------------------------------------------------
# split of the Laplace-Beltrami operator


def membrane_part(shape, x, dp, d2p):
    """``(1/r) d_a (r d_a p)`` from derivative tables over (z, r, xi)."""
    r = np.asarray(x, float)[..., 1]
    return d2p[..., 0, 0] + d2p[..., 1, 1] + dp[..., 1] / r


def bending_part(shape, x, dp, d2p):
    r, T, _, _ = shape.derivatives(x)
    eps = shape.epsilon
    g33 = (1 + r * r * np.sum(T * T, -1)) / (eps * r) ** 2
    return (
        -2 / eps * np.einsum("...a,...a->...", T, d2p[..., :2, 2])
        - lap_theta(shape, x) / eps * dp[..., 2]
        + g33 * d2p[..., 2, 2]
    )


def beltrami_split_check(shape, p_expr, points, xi_values):
    """Max of ``|Lap_m p + Lap_b p - Lap p|`` over sample points.

    ``Lap p`` is the divergence form ``(1/sqrt g) d_i (sqrt g g^ij d_j p)``
    built symbolically from the wrap expression stored on the shape, so the
    shape must come from :func:`geometry.shape_from_expression`.
    """
    z, r, xi = sp_sym.symbols("z r xi", real=True)
    theta = sp_sym.sympify(shape.params["expr"], locals={"z": z, "r": r})
    eps = sp_sym.pi / shape.n_blades
    T1, T2 = sp_sym.diff(theta, z), sp_sym.diff(theta, r)
    a = 1 + r**2 * (T1**2 + T2**2)
    gi = sp_sym.Matrix([[1, 0, -T1 / eps], [0, 1, -T2 / eps], [-T1 / eps, -T2 / eps, a / (eps * r) ** 2]])
    sg = eps * r
    p = sp_sym.sympify(p_expr, locals={"z": z, "r": r, "xi": xi})
    X = (z, r, xi)
    lap = sum(sp_sym.diff(sg * sum(gi[i, j] * sp_sym.diff(p, X[j]) for j in range(3)), X[i]) for i in range(3)) / sg
    f_lap = sp_sym.lambdify(X, lap, "numpy")
    dps = [sp_sym.lambdify(X, sp_sym.diff(p, v), "numpy") for v in X]
    d2ps = [[sp_sym.lambdify(X, sp_sym.diff(p, u, v), "numpy") for v in X] for u in X]
    pts = np.asarray(points, float)
    worst = 0.0
    for s in np.atleast_1d(xi_values):
        Zs, Rs = pts[..., 0], pts[..., 1]
        S = np.full_like(Zs, s)
        dp = np.stack([np.broadcast_to(f(Zs, Rs, S), Zs.shape) for f in dps], -1)
        d2p = np.stack([np.stack([np.broadcast_to(f(Zs, Rs, S), Zs.shape) for f in row], -1) for row in d2ps], -2)
        split = membrane_part(shape, pts, dp, d2p) + bending_part(shape, pts, dp, d2p)
        ref = np.broadcast_to(f_lap(Zs, Rs, S), Zs.shape)
        worst = max(worst, float(np.max(np.abs(split - ref))))
    return worst


# ---------------------------------------------------------------------------
# discrete problems


@dataclass
class PressureGeometry:
    shape: geo.BladeShape
    space: Space
    order: int
    x: np.ndarray
    wdet: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray
    r: np.ndarray
    T: np.ndarray
    c: np.ndarray
    a: np.ndarray
    g33: np.ndarray


def pressure_geometry(shape, space: Space, order=None):
    order = order or 2 * space.degree + 2
    ed = element_data(space, order)
    r, T, _, _ = shape.derivatives(ed.x)
    a = 1 + r * r * np.sum(T * T, -1)
    return PressureGeometry(
        shape, space, order, ed.x, ed.wdet, ed.phi, ed.dphi, r, T, lap_theta(shape, ed.x), a,
        a / (shape.epsilon * r) ** 2,
    )


def reaction_coefficient(pg: PressureGeometry, tau, kind="consistent"):
    """``2 g^33 / tau^2`` (from the central second quotient) or ``a / (tau^2 r eps)``."""
    if kind == "consistent":
        return 2 * pg.g33 / tau**2
    if kind == "scaled":
        return pg.a / (tau**2 * pg.r * pg.shape.epsilon)
    raise ValueError(f"unknown reaction kind '{kind}'")


@dataclass
class PressureProblem:
    geom: PressureGeometry
    tau: float
    source: object = None  # callable x -> S, or array at quadrature points
    p_minus: Optional[np.ndarray] = None
    p_plus: Optional[np.ndarray] = None
    dirichlet: object = 0.0  # inlet datum: scalar or callable
    neumann: Optional[Callable] = None  # (x, normal) -> flux on solid/outlet
    reaction: str = "consistent"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def _q(pg, coeffs):
    c = np.asarray(coeffs, float)[pg.space.cell_dofs]
    return np.einsum("tl,ql->tq", c, pg.phi), np.einsum("tl,tqld->tqd", c, pg.dphi)


def _source(pg, source):
    if source is None:
        return np.zeros_like(pg.r)
    if callable(source):
        return np.asarray(source(pg.x), float) + 0 * pg.r
    return np.asarray(source, float) + 0 * pg.r


def _solve_scalar(pg: PressureGeometry, diag, adv, rhs_q, rhs_grad, dirichlet, neumann):
    """Solve ``(r grad p, grad q) + (r adv.grad p, q) + (r diag p, q) = (r f, q) + (r F, grad q) + <r g_n, q>``."""
    V = pg.space
    W = pg.wdet * pg.r
    loc = np.einsum("tq,tqad,tqbd->tab", W, pg.dphi, pg.dphi) + np.einsum("tq,tq,qa,qb->tab", W, diag, pg.phi, pg.phi)
    if adv is not None:
        loc = loc + np.einsum("tq,tqd,tqbd,qa->tab", W, adv, pg.dphi, pg.phi)
    K = scatter_matrix(V.cell_dofs, V.cell_dofs, loc[:, None, :, None, :], V.n, V.n)
    fl = np.einsum("tq,tq,qa->ta", W, rhs_q, pg.phi)
    if rhs_grad is not None:
        fl = fl + np.einsum("tq,tqd,tqad->ta", W, rhs_grad, pg.dphi)
    f = scatter_vector(V.cell_dofs, fl[:, None, :], V.n)
    if neumann is not None:
        bx, bw, bphi, bdofs, bn = boundary_data(V, ("solid", "outlet"), pg.order)
        if len(bx):
            gn = np.asarray(neumann(bx, np.broadcast_to(bn[:, None, :], bx.shape)), float)
            f = f + scatter_vector(bdofs, np.einsum("eq,eq,qa->ea", bw * bx[..., 1], gn, bphi)[:, None, :], V.n)
    fixed = V.boundary_dofs("inlet")
    vals = dirichlet(V.coords[fixed]) if callable(dirichlet) else np.full(len(fixed), float(dirichlet))
    free = np.setdiff1d(np.arange(V.n), fixed)
    p = np.zeros(V.n)
    p[fixed] = vals
    b = f[free] - K[free][:, fixed] @ p[fixed]
    try:
        p[free] = spla.splu(K[free][:, free].tocsc()).solve(b)
    except RuntimeError as exc:
        raise LinearSolveFailure(str(exc)) from exc
    if not np.all(np.isfinite(p)):
        raise LinearSolveFailure("non-finite pressure")
    return p


def solve_interior_pressure(problem: PressureProblem):
    """Helmholtz problem on an interior surface with lagged transverse terms."""
    pg = problem.geom
    tau, eps = problem.tau, pg.shape.epsilon
    alpha = reaction_coefficient(pg, tau, problem.reaction)
    rhs = _source(pg, problem.source)
    grad_rhs = None
    if problem.p_minus is not None and problem.p_plus is not None:
        pm, gm = _q(pg, problem.p_minus)
        pp, gp = _q(pg, problem.p_plus)
        rhs = rhs + 0.5 * alpha * (pp + pm) - pg.c / eps * (pp - pm) / (2 * tau)
        rhs = rhs - 2 / eps * np.einsum("tqa,tqa->tq", pg.T, (gp - gm) / (2 * tau))
    return _solve_scalar(pg, alpha, None, rhs, grad_rhs, problem.dirichlet, problem.neumann)


def solve_blade_pressure(
    side,
    geom: PressureGeometry,
    tau,
    interior: Sequence[np.ndarray],
    ghost: np.ndarray,
    source=None,
    dirichlet=0.0,
    neumann=None,
    w3_interior: Optional[Sequence[np.ndarray]] = None,
    vspace: Optional[Space] = None,
):
    """Pressure on the blade face ``xi = side``.

    ``interior`` lists the interior surface pressures ordered away from the
    face (at least two are required).  ``ghost`` is the value used one step
    beyond the face.  If ``w3_interior`` (the transverse velocity on the first
    two interior surfaces, coefficients in ``vspace``) is given, its one-sided
    second quotient is added to the source.
    """
    if len(interior) < 2:
        raise InsufficientLayers("blade pressure needs two interior surfaces next to the face")
    if side not in (-1, 1):
        raise ValueError("side must be -1 or +1")
    pg = geom
    eps = pg.shape.epsilon
    s = float(side)
    p1, g1 = _q(pg, interior[0])
    pgh, _ = _q(pg, ghost)
    rhs = _source(pg, source)
    if w3_interior is not None:
        from .fem import at_quadrature

        ed = element_data(vspace, pg.order)
        w1 = at_quadrature(vspace, w3_interior[0], ed)[0]
        w2 = at_quadrature(vspace, w3_interior[1], ed)[0]
        rhs = rhs + (w2 - 2 * w1) / tau**2
    # d = -s (p1 - p0) / tau along +xi; implicit in p0
    diag = 2 * pg.g33 / tau**2 + s * pg.c / (eps * tau)
    adv = s * 2 / (eps * tau) * pg.T
    rhs = rhs + pg.g33 * (p1 + pgh) / tau**2 + s * pg.c / (eps * tau) * p1
    rhs = rhs + s * 2 / (eps * tau) * np.einsum("tqa,tqa->tq", pg.T, g1)
    return _solve_scalar(pg, diag, adv, rhs, None, dirichlet, neumann)
