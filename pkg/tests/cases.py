"""Manufactured setups shared by the unit tests and the acceptance suite."""

import numpy as np
import sympy as sp

from biparallel import geometry as geo
from biparallel import layer as L
from biparallel import manufactured as mf
from biparallel import orchestrator as O
from biparallel import pressure as PR
from biparallel.fem import Space, norms
from biparallel.manufactured import R, XI, Z
from biparallel.mesh import ParameterDomain, triangulate

# ---------------------------------------------------------------------------
# pressure

P_A = sp.sin(sp.pi * Z) * sp.cos(sp.pi * R / 2)
P_EXACT = P_A + Z * R * (1 - XI**2) ** 3
_V = (Z, R, XI)
_P = sp.lambdify(_V, P_EXACT)
_DP = sp.lambdify(_V, [sp.diff(P_EXACT, v) for v in _V])
_D2P = sp.lambdify(_V, [[sp.diff(P_EXACT, u, v) for v in _V] for u in _V])


def _arr(vals, shape):
    return np.stack([np.broadcast_to(np.asarray(a, float), shape) for a in vals], -1)


def p_exact(x, xi):
    x = np.asarray(x, float)
    return np.broadcast_to(np.asarray(_P(x[..., 0], x[..., 1], xi), float), x.shape[:-1])


def p_grad(x, xi):
    x = np.asarray(x, float)
    return _arr(_DP(x[..., 0], x[..., 1], xi), x.shape[:-1])


def p_lap(shape, x, xi):
    x = np.asarray(x, float)
    s = x.shape[:-1]
    dp = _arr(_DP(x[..., 0], x[..., 1], xi), s)
    d2 = np.stack([_arr(row, s) for row in _D2P(x[..., 0], x[..., 1], xi)], -2)
    return PR.membrane_part(shape, x, dp, d2) + PR.bending_part(shape, x, dp, d2)


def _neumann(xi):
    return lambda x, n: np.einsum("...d,...d->...", p_grad(x, xi)[..., :2], n)


def interior_pressure_error(shape, h, tau=0.25, xi=0.25):
    """L2 error of the interior pressure solve against the exact trace.

    The source is the semi-discrete operator applied to the exact field, so
    only the finite element error remains.
    """
    Q = Space(triangulate(ParameterDomain(), h), 1)
    pg = PR.pressure_geometry(shape, Q)
    x, eps = pg.x, shape.epsilon
    s = x.shape[:-1]
    d2 = np.stack([_arr(row, s) for row in _D2P(x[..., 0], x[..., 1], xi)], -2)
    dp = _arr(_DP(x[..., 0], x[..., 1], xi), s)
    pm, pp, p0 = p_exact(x, xi - tau), p_exact(x, xi + tau), p_exact(x, xi)
    gm, gp = p_grad(x, xi - tau)[..., :2], p_grad(x, xi + tau)[..., :2]
    d1, d1g = (pp - pm) / (2 * tau), (gp - gm) / (2 * tau)
    lap = (PR.membrane_part(shape, x, dp, d2) - 2 / eps * np.einsum("...a,...a->...", pg.T, d1g)
           - pg.c / eps * d1 + pg.g33 * (pp - 2 * p0 + pm) / tau**2)
    prob = PR.PressureProblem(pg, tau, -lap, Q.interpolate(lambda y: p_exact(y, xi - tau)),
                              Q.interpolate(lambda y: p_exact(y, xi + tau)),
                              dirichlet=lambda y: p_exact(y, xi), neumann=_neumann(xi))
    p = PR.solve_interior_pressure(prob)
    return norms(Q, p, lambda y: p_exact(y, xi)).l2


def blade_pressure_error(shape, h, tau, side=-1):
    """L2 error of the blade-face solve with exact interior and ghost data."""
    Q = Space(triangulate(ParameterDomain(), h), 1)
    pg = PR.pressure_geometry(shape, Q)
    s = float(side)
    ints = [Q.interpolate(lambda y, k=k: p_exact(y, s * (1 - k * tau))) for k in (1, 2)]
    ghost = Q.interpolate(lambda y: p_exact(y, -s))
    p = PR.solve_blade_pressure(side, pg, tau, ints, ghost, source=lambda y: -p_lap(shape, y, s),
                                dirichlet=lambda y: p_exact(y, s), neumann=_neumann(s))
    return norms(Q, p, lambda y: p_exact(y, s)).l2


# ---------------------------------------------------------------------------
# single layer


def layer_errors(shape, h, man=None, nu=1.0, xi=0.25, tau=0.25, eta=1e-8, degree=2):
    """(H1 velocity, L2 pressure) errors of the manufactured layer problem."""
    from biparallel.twolevel import manufactured_case

    case = manufactured_case(man or mf.smooth_field(0.5), shape, nu, xi, tau, eta, pressure_degree=1)
    pb = case.problem(triangulate(ParameterDomain(), h), degree)
    st = L.solve_layer(pb)
    return case.errors(pb, st.w, st.p)


def penalty_solutions(shape, etas, h=0.125, xi=0.25, tau=0.25, nu=1.0):
    """Layer solves at several penalties with the unpenalised divergence datum."""
    man = mf.smooth_field(0.5)
    m = triangulate(ParameterDomain(), h)
    V, Q = Space(m, 2), Space(m, 1)
    g = L.layer_geometry(shape, V, Q)
    out = {}
    for eta in etas:
        pb = L.LayerProblem(
            g, nu=nu, tau=tau, eta=eta, xi=xi,
            w_minus=V.interpolate(man.velocity(xi - tau)), w_plus=V.interpolate(man.velocity(xi + tau)),
            p_minus=Q.interpolate(man.pressure(xi - tau)), p_plus=Q.interpolate(man.pressure(xi + tau)),
            forcing=mf.layer_forcing(man, shape, nu, xi, tau), traction=mf.traction(man, shape, nu, xi),
            dirichlet=man.velocity(xi), div_source=mf.divergence_2d(man, xi),
        )
        out[eta] = L.solve_layer(pb)
    return V, Q, out


# ---------------------------------------------------------------------------
# stacks

STACK_SHAPE = geo.log_spiral(c=0.3, n_blades=2, omega=0.2)
STACK_FIELD = mf.solenoidal_field(0.5, 0.5)


def stack_config(h, m, threads=1, shape=STACK_SHAPE, man=STACK_FIELD, nu=1.0, **kw):
    kw = {"eta": 1e-8, "tol": 1e-6, "max_sweeps": 30, **kw}
    return O.SolverConfig(
        shape, nu=nu, h=h, m=m, threads=threads,
        forcing=lambda x, xi: mf.forcing_3d(man, shape, nu, xi)(x),
        traction=lambda x, n, xi: mf.traction(man, shape, nu, xi)(x, n), **kw,
    )


def stack_errors_at(stack, ctx, xis, man=STACK_FIELD):
    """Max (H1 velocity, L2 pressure) error over the surfaces at the listed xi."""
    V, Q = ctx.vspace, ctx.pspace
    ew = ep = 0.0
    for s in xis:
        k = int(np.argmin(np.abs(stack.xi - s)))
        assert abs(stack.xi[k] - s) < 1e-12
        ew = max(ew, norms(V, stack.w[k], man.velocity(s), man.velocity_grad(s)).h1)
        ep = max(ep, norms(Q, stack.p[k], man.pressure(s)).l2)
    return ew, ep


def synthetic_stack(space, m):
    """Smooth velocity stack whose transverse component matches on both faces."""
    field = mf.Manufactured(
        (sp.sin(sp.pi * Z) * R, sp.cos(Z) * R**2 * (1 + XI) ** 2,
         sp.sin(sp.pi * R) * sp.cos(sp.pi * Z) * (1 - XI**2) * sp.exp(XI)), 0 * Z)
    xi = -1.0 + 2.0 * np.arange(m + 1) / m
    return np.stack([space.interpolate(field.velocity(s)) for s in xi])
