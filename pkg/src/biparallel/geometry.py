"""Closed-form geometry of the blade-adapted coordinate system.

Coordinates are ``x = (x1, x2) = (z, r)`` on the meridional domain and the
transverse coordinate ``xi`` in [-1, 1].  The rotated blade map is

    X(z, r, xi) = (r cos(theta), r sin(theta), z),  theta = eps*xi + Theta(z, r)

with ``eps = pi / N`` for ``N`` blades.  Index 0 and 1 of every tensor axis are
the surface directions (z, r) and index 2 is xi.  All functions broadcast over
leading axes: points are arrays of shape ``(..., 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import sympy as sp

from .errors import DegenerateUpdate, SingularForm

_Z, _R = sp.symbols("z r", real=True)
_I3 = np.eye(3)
_E2 = np.array([0.0, 1.0])  # delta_{2 alpha} in zero-based form


def _broadcast(fn, nargs_shape):
    def wrapped(z, r):
        val = fn(z, r)
        return np.broadcast_to(np.asarray(val, dtype=float), nargs_shape(z, r)).copy()

    return wrapped


@dataclass(frozen=True)
class BladeShape:
    """Wrap function Theta(z, r) with derivatives through third order.

    The derivative callables take ``(z, r)`` arrays and return arrays with
    trailing axes ``(2,)``, ``(2, 2)`` and ``(2, 2, 2)`` respectively.
    """

    theta: Callable
    theta_d1: Callable
    theta_d2: Callable
    theta_d3: Callable
    n_blades: int
    omega: float = 0.0
    name: str = "custom"
    params: dict = field(default_factory=dict)
    low_accuracy_d3: bool = False

    @property
    def epsilon(self) -> float:
        return float(np.pi / self.n_blades)

    def derivatives(self, x):
        """Return ``(r, T, TT, TTT)`` at points ``x``."""
        x = np.asarray(x, dtype=float)
        z, r = x[..., 0], x[..., 1]
        return r, self.theta_d1(z, r), self.theta_d2(z, r), self.theta_d3(z, r)


def shape_from_expression(expr, n_blades, omega=0.0, name="custom", params=None):
    """Build a BladeShape from a sympy expression (or string) in ``z`` and ``r``."""
    if isinstance(expr, str):
        expr = sp.sympify(expr, locals={"z": _Z, "r": _R})
    xs = (_Z, _R)
    shp = lambda z, r: np.broadcast(np.asarray(z), np.asarray(r)).shape

    def lam(e):
        return _broadcast(sp.lambdify(xs, e, "numpy"), shp)

    f0 = lam(expr)
    d1 = [lam(sp.diff(expr, a)) for a in xs]
    d2 = [[lam(sp.diff(expr, a, b)) for b in xs] for a in xs]
    d3 = [[[lam(sp.diff(expr, a, b, c)) for c in xs] for b in xs] for a in xs]

    def g1(z, r):
        return np.stack([f(z, r) for f in d1], axis=-1)

    def g2(z, r):
        return np.stack([np.stack([f(z, r) for f in row], axis=-1) for row in d2], axis=-2)

    def g3(z, r):
        return np.stack(
            [np.stack([np.stack([f(z, r) for f in row], axis=-1) for row in blk], axis=-2) for blk in d3],
            axis=-3,
        )

    return BladeShape(f0, g1, g2, g3, int(n_blades), float(omega), name, dict(params or {}, expr=str(expr)))


def flat(n_blades=8, omega=0.0):
    return shape_from_expression(sp.Integer(0), n_blades, omega, "flat")


def linear_wrap(c=0.5, n_blades=8, omega=0.0):
    return shape_from_expression(c * _Z, n_blades, omega, "linear-wrap", {"c": c})


def log_spiral(c=0.5, n_blades=8, omega=0.0):
    return shape_from_expression(c * sp.log(_R), n_blades, omega, "log-spiral", {"c": c})


def sampled(path_or_rows, n_blades=8, omega=0.0):
    """Wrap function interpolated by tensor splines from ``z r Theta`` rows.

    Quintic splines are used when each axis has at least six samples, so
    third derivatives are continuous.  Coarser grids fall back to lower
    degree with third derivatives from differenced second derivatives, and
    the shape is flagged ``low_accuracy_d3``.
    """
    from scipy.interpolate import RectBivariateSpline

    rows = np.loadtxt(path_or_rows) if isinstance(path_or_rows, (str, bytes)) or hasattr(path_or_rows, "__fspath__") else np.asarray(path_or_rows, float)
    zs = np.unique(rows[:, 0])
    rs = np.unique(rows[:, 1])
    grid = np.full((zs.size, rs.size), np.nan)
    iz = np.searchsorted(zs, rows[:, 0])
    ir = np.searchsorted(rs, rows[:, 1])
    grid[iz, ir] = rows[:, 2]
    if np.isnan(grid).any() or min(zs.size, rs.size) < 2:
        raise ValueError("sampled wrap grid must be a complete tensor grid of z and r")
    kz, kr = min(5, zs.size - 1), min(5, rs.size - 1)
    spl = RectBivariateSpline(zs, rs, grid, kx=kz, ky=kr)
    step = 1e-4 * max(zs[-1] - zs[0], rs[-1] - rs[0])

    def ev(dz, dr):
        if dz < kz and dr < kr:
            return lambda z, r: spl.ev(z, r, dx=dz, dy=dr)
        # one order beyond the spline: central difference of the next lower derivative
        if dz >= kz:
            lo = ev(dz - 1, dr)
            return lambda z, r: (lo(np.asarray(z) + step, r) - lo(np.asarray(z) - step, r)) / (2 * step)
        lo = ev(dz, dr - 1)
        return lambda z, r: (lo(z, np.asarray(r) + step) - lo(z, np.asarray(r) - step)) / (2 * step)

    def g1(z, r):
        return np.stack([ev(1, 0)(z, r), ev(0, 1)(z, r)], axis=-1)

    def g2(z, r):
        a, b, c = ev(2, 0)(z, r), ev(1, 1)(z, r), ev(0, 2)(z, r)
        return np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)

    def g3(z, r):
        t = {k: ev(3 - k, k)(z, r) for k in range(4)}
        out = np.empty(np.shape(t[0]) + (2, 2, 2))
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    out[..., i, j, k] = t[i + j + k]
        return out

    return BladeShape(ev(0, 0), g1, g2, g3, int(n_blades), float(omega), "sampled", {}, min(kz, kr) < 5)


PRESETS = {"flat": flat, "linear-wrap": linear_wrap, "log-spiral": log_spiral}


def preset(name, **kwargs):
    """Resolve a preset by its CLI name."""
    if name == "sampled":
        return sampled(kwargs.pop("path"), **kwargs)
    if name not in PRESETS:
        raise KeyError(f"unknown geometry preset '{name}'")
    return PRESETS[name](**kwargs)


# ---------------------------------------------------------------------------
# point quantities


def embed(shape: BladeShape, x, xi):
    x = np.asarray(x, dtype=float)
    z, r = x[..., 0], x[..., 1]
    th = shape.epsilon * np.asarray(xi, dtype=float) + shape.theta(z, r)
    return np.stack([r * np.cos(th), r * np.sin(th), z + 0.0 * th], axis=-1)


def basis_vectors(shape, x, xi):
    """Cartesian covariant basis ``e_i = dX/dx^i`` stacked on axis -2."""
    r, T, _, _ = shape.derivatives(x)
    x = np.asarray(x, dtype=float)
    th = shape.epsilon * np.asarray(xi, dtype=float) + shape.theta(x[..., 0], r)
    er = np.stack([np.cos(th), np.sin(th), 0 * th], -1)
    et = np.stack([-np.sin(th), np.cos(th), 0 * th], -1)
    k = np.broadcast_to(np.array([0.0, 0.0, 1.0]), et.shape)
    e1 = (r * T[..., 0])[..., None] * et + k
    e2 = er + (r * T[..., 1])[..., None] * et
    e3 = (shape.epsilon * r)[..., None] * et
    return np.stack([e1, e2, e3], axis=-2)


def surface_metric(shape, x):
    """First fundamental form ``(a_cov, a_con, a_det)``."""
    r, T, _, _ = shape.derivatives(x)
    r2 = (r * r)[..., None, None]
    a_cov = np.eye(2) + r2 * T[..., :, None] * T[..., None, :]
    a_det = 1.0 + r * r * np.sum(T * T, axis=-1)
    a_con = np.eye(2) - r2 * T[..., :, None] * T[..., None, :] / a_det[..., None, None]
    return a_cov, a_con, a_det


def space_metric(shape, x):
    """Space metric ``(g_cov, g_con, g_det)`` with ``g_det = eps^2 r^2``."""
    r, T, _, _ = shape.derivatives(x)
    eps = shape.epsilon
    a_cov, _, a_det = surface_metric(shape, x)
    g = np.zeros(r.shape + (3, 3))
    g[..., :2, :2] = a_cov
    g[..., :2, 2] = g[..., 2, :2] = eps * (r * r)[..., None] * T
    g[..., 2, 2] = (eps * r) ** 2
    gi = np.zeros_like(g)
    gi[..., :2, :2] = np.eye(2)
    gi[..., :2, 2] = gi[..., 2, :2] = -T / eps
    gi[..., 2, 2] = a_det / (eps * r) ** 2
    return g, gi, (eps * r) ** 2


def metric_derivative(shape, x):
    """Partial derivatives ``d_mu g_ij`` with trailing axis mu in (z, r)."""
    r, T, TT, _ = shape.derivatives(x)
    eps = shape.epsilon
    out = np.zeros(r.shape + (3, 3, 2))
    rr = r[..., None, None, None]
    TaTb = T[..., :, None, None] * T[..., None, :, None]
    out[..., :2, :2, :] = 2 * rr * TaTb * _E2 + rr**2 * (
        TT[..., :, None, :] * T[..., None, :, None] + T[..., :, None, None] * TT[..., None, :, :]
    )
    r1 = r[..., None, None]
    side = eps * (2 * r1 * T[..., :, None] * _E2 + r1**2 * TT)
    out[..., :2, 2, :] = side
    out[..., 2, :2, :] = side
    out[..., 2, 2, :] = 2 * eps**2 * r[..., None] * _E2
    return out


def christoffel(shape, x):
    """Second-kind Christoffel symbols ``G[..., i, j, k] = Gamma^i_{jk}``."""
    r, T, TT, _ = shape.derivatives(x)
    eps = shape.epsilon
    T2 = T[..., 1]
    G = np.zeros(r.shape + (3, 3, 3))
    G[..., 1, :2, :2] = -r[..., None, None] * T[..., :, None] * T[..., None, :]
    G[..., 1, 2, :2] = -eps * r[..., None] * T
    G[..., 1, :2, 2] = G[..., 1, 2, :2]
    G[..., 1, 2, 2] = -(eps**2) * r
    r2 = r[..., None, None]
    G[..., 2, :2, :2] = (
        (_E2[:, None] * T[..., None, :] + _E2[None, :] * T[..., :, None]) / r2
        + TT
        + r2 * T2[..., None, None] * T[..., :, None] * T[..., None, :]
    ) / eps
    G[..., 2, 2, :2] = _E2 / r[..., None] + (r * T2)[..., None] * T
    G[..., 2, :2, 2] = G[..., 2, 2, :2]
    G[..., 2, 2, 2] = eps * r * T2
    return G


def christoffel_derivative(shape, x):
    """``dG[..., i, j, k, mu] = d_mu Gamma^i_{jk}`` for mu in (z, r)."""
    r, T, TT, TTT = shape.derivatives(x)
    eps = shape.epsilon
    T2 = T[..., 1]
    T2m = TT[..., 1, :]  # d_mu Theta_2
    d = np.zeros(r.shape + (3, 3, 3, 2))
    R3 = r[..., None, None, None]
    # Gamma^2_{bc} = -r T_b T_c
    d[..., 1, :2, :2, :] = -(
        _E2 * T[..., :, None, None] * T[..., None, :, None]
        + R3 * (TT[..., :, None, :] * T[..., None, :, None] + T[..., :, None, None] * TT[..., None, :, :])
    )
    R2 = r[..., None, None]
    side = -eps * (_E2 * T[..., :, None] + R2 * TT)
    d[..., 1, 2, :2, :] = side
    d[..., 1, :2, 2, :] = side
    d[..., 1, 2, 2, :] = -(eps**2) * _E2
    # Gamma^3_{ab}
    sym1 = _E2[:, None, None] * T[..., None, :, None] + _E2[None, :, None] * T[..., :, None, None]
    sym2 = _E2[:, None, None] * TT[..., None, :, :] + _E2[None, :, None] * TT[..., :, None, :]
    TaTb = T[..., :, None, None] * T[..., None, :, None]
    dTaTb = TT[..., :, None, :] * T[..., None, :, None] + T[..., :, None, None] * TT[..., None, :, :]
    d[..., 2, :2, :2, :] = (
        -sym1 * _E2 / R3**2
        + sym2 / R3
        + TTT
        + _E2 * T2[..., None, None, None] * TaTb
        + R3 * (T2m[..., None, None, :] * TaTb + T2[..., None, None, None] * dTaTb)
    ) / eps
    # Gamma^3_{3a} = delta_{2a}/r + r T_2 T_a
    g3 = (
        -_E2[:, None] * _E2[None, :] / R2**2
        + _E2 * T2[..., None, None] * T[..., :, None]
        + R2 * (T2m[..., None, :] * T[..., :, None] + T2[..., None, None] * TT)
    )
    d[..., 2, 2, :2, :] = g3
    d[..., 2, :2, 2, :] = g3
    d[..., 2, 2, 2, :] = eps * (_E2 * T2[..., None] + r[..., None] * T2m)
    return d


@dataclass(frozen=True)
class SecondFundamental:
    b_cov: np.ndarray
    c_cov: np.ndarray
    b_inv: np.ndarray
    c_inv: np.ndarray
    mean_curv: np.ndarray
    gauss_curv: np.ndarray
    singular: np.ndarray

    def require_inverse(self):
        if np.any(self.singular):
            raise SingularForm("second or third fundamental form is singular at some points")
        return self.b_inv, self.c_inv


def second_fundamental(shape, x, floor=1e-10):
    """Second and third fundamental forms, curvatures and guarded inverses.

    Inverses are set to NaN where ``|det| < floor * scale**2`` and the point is
    flagged in ``singular``.
    """
    r, T, TT, _ = shape.derivatives(x)
    a_cov, a_con, a_det = surface_metric(shape, x)
    sa = np.sqrt(a_det)
    T1, T2 = T[..., 0], T[..., 1]
    b = np.empty(r.shape + (2, 2))
    b[..., 0, 0] = (T2 * (a_cov[..., 0, 0] - 1) + r * TT[..., 0, 0]) / sa
    b[..., 0, 1] = (T1 * a_cov[..., 1, 1] + r * TT[..., 0, 1]) / sa
    b[..., 1, 0] = b[..., 0, 1]
    b[..., 1, 1] = (T2 * (a_cov[..., 1, 1] + 1) + r * TT[..., 1, 1]) / sa
    c = np.einsum("...ls,...al,...bs->...ab", a_con, b, b)
    H = 0.5 * np.einsum("...ab,...ab->...", a_con, b)
    detb = b[..., 0, 0] * b[..., 1, 1] - b[..., 0, 1] ** 2
    K = detb / a_det
    detc = c[..., 0, 0] * c[..., 1, 1] - c[..., 0, 1] ** 2
    scale = np.maximum(1.0, np.max(np.abs(b), axis=(-1, -2)))
    sing = (np.abs(detb) < floor * scale**2) | (np.abs(detc) < floor * scale**4)
    safe = lambda m, dt: np.where(
        sing[..., None, None],
        np.nan,
        np.stack(
            [np.stack([m[..., 1, 1], -m[..., 0, 1]], -1), np.stack([-m[..., 1, 0], m[..., 0, 0]], -1)], -2
        )
        / np.where(sing, 1.0, dt)[..., None, None],
    )
    return SecondFundamental(b, c, safe(b, detb), safe(c, detc), H, K, sing)


def surface_christoffel(shape, x):
    """Christoffel symbols of the surface metric, ``Gs[..., l, a, b]``."""
    r, T, _, _ = shape.derivatives(x)
    G = christoffel(shape, x)
    _, a_con, _ = surface_metric(shape, x)
    tang = shape.epsilon * (r * r)[..., None] * np.einsum("...lm,...m->...l", a_con, T)
    return G[..., :2, :2, :2] + tang[..., :, None, None] * G[..., 2, None, :2, :2]


def unit_normal(shape, x, xi=0.0):
    """Unit normal: contravariant components and cartesian vector."""
    r, T, _, _ = shape.derivatives(x)
    _, _, a_det = surface_metric(shape, x)
    sa = np.sqrt(a_det)
    n_con = np.concatenate([-(r[..., None] * T) / sa[..., None], (sa / (shape.epsilon * r))[..., None]], -1)
    x = np.asarray(x, float)
    th = shape.epsilon * np.asarray(xi, float) + shape.theta(x[..., 0], r)
    s, c = np.sin(th), np.cos(th)
    T1, T2 = T[..., 0], T[..., 1]
    n_cart = np.stack([-(s + r * T2 * c), c - r * T2 * s, -r * T1 + 0 * th], -1) / sa[..., None]
    return n_con, n_cart


def angular_velocity(shape, x):
    """Contravariant components of omega * k."""
    r, T, _, _ = shape.derivatives(x)
    w = shape.omega
    return np.stack([w + 0 * r, 0 * r, -w * T[..., 0] / shape.epsilon], -1)


def pi_factor(shape, x, w):
    """Pi(w, Theta) = eps w^3 + w^l Theta_l."""
    _, T, _, _ = shape.derivatives(x)
    return shape.epsilon * w[..., 2] + np.sum(w[..., :2] * T, -1)


def coriolis_matrix(shape, x):
    """Matrix ``K`` with ``C^i = K^i_j w^j`` (Coriolis force 2 omega x w)."""
    r, T, _, _ = shape.derivatives(x)
    eps, om = shape.epsilon, shape.omega
    # Pi = T_1 w1 + T_2 w2 + eps w3
    pi_row = np.concatenate([T, np.full(r.shape + (1,), eps)], -1)
    K = np.zeros(r.shape + (3, 3))
    K[..., 1, :] = -2 * om * r[..., None] * pi_row
    K[..., 2, :] = 2 * om / eps * (r * T[..., 1])[..., None] * pi_row
    K[..., 2, 1] += 2 * om / eps / r
    return K


def coriolis(shape, x, w):
    return np.einsum("...ij,...j->...i", coriolis_matrix(shape, x), np.asarray(w, float))


def centrifugal(shape, x):
    """Contravariant components of the centrifugal acceleration omega^2 r e_r."""
    r, T, _, _ = shape.derivatives(x)
    om2 = shape.omega**2
    return np.stack([0 * r, om2 * r, -om2 * r * T[..., 1] / shape.epsilon], -1)


def covariant_derivatives(shape, x, w, grad_w, dxi_w):
    """Covariant derivative table and divergence.

    ``grad_w[..., k, a]`` holds ``d w^k / d x^a``; ``dxi_w[..., k]`` holds
    ``d w^k / d xi``.  Returns ``nab[..., i, j] = nabla_i w^j`` and ``div w``.
    """
    w = np.asarray(w, float)
    D = np.concatenate([np.swapaxes(np.asarray(grad_w, float), -1, -2), np.asarray(dxi_w, float)[..., None, :]], -2)
    G = christoffel(shape, x)
    nab = D + np.einsum("...jik,...k->...ij", G, w)
    r = np.asarray(x, float)[..., 1]
    div = D[..., 0, 0] + D[..., 1, 1] + D[..., 2, 2] + w[..., 1] / r
    return nab, div


def vector_laplacian_coefficients(shape, x):
    """Coefficients of the trace Laplacian in contravariant components.

    ``Delta w^k = g^{ij} d_i d_j w^k + P[k, l, m] d_l w^m + q[k, m] w^m``.
    """
    _, gc, _ = space_metric(shape, x)
    G = christoffel(shape, x)
    dG = christoffel_derivative(shape, x)
    trace = np.einsum("...ij,...lij->...l", gc, G)
    P = 2 * np.einsum("...lj,...kjm->...klm", gc, G) - np.einsum("km,...l->...klm", _I3, trace)
    q = (
        np.einsum("...aj,...kjna->...kn", gc[..., :2, :], dG)
        + np.einsum("...ij,...kim,...mjn->...kn", gc, G, G)
        - np.einsum("...l,...kln->...kn", trace, G)
    )
    return gc, P, q


def vector_laplacian(shape, x, w, dw, d2w):
    """Trace Laplacian from full derivative tables.

    ``dw[..., k, i] = d_i w^k`` and ``d2w[..., k, i, j] = d_i d_j w^k`` over all
    three coordinates.
    """
    gc, P, q = vector_laplacian_coefficients(shape, x)
    return (
        np.einsum("...ij,...kij->...k", gc, d2w)
        + np.einsum("...klm,...ml->...k", P, dw)
        + np.einsum("...km,...m->...k", q, w)
    )


@dataclass(frozen=True)
class OperatorCoefficients:
    P_beta: np.ndarray  # [k, beta, j]
    P_3: np.ndarray  # [k, j]
    q: np.ndarray  # [k, j]
    pi: np.ndarray  # [k, i, j]
    phi_coupling: np.ndarray  # [i, beta]
    eta_vec: np.ndarray  # [i]
    l_coeffs: dict
    l_xi_coeffs: dict
    L_beta: np.ndarray  # [beta, i, j]
    L: np.ndarray  # [i, j]
    Pi_caps: np.ndarray  # [k, i, j]
    alpha_tau: np.ndarray
    g_cov: np.ndarray
    g_con: np.ndarray


def operator_coefficients(shape, x, tau, nu=1.0):
    """Coefficient tables of the rotating Navier-Stokes operator.

    ``L_beta`` and ``L`` are the covariant first- and zero-order coefficients of
    the surface-implicit part of the layer operator with centrally differenced
    transverse terms; ``alpha_tau = 2 nu a / (r^2 eps^2 tau^2)``.
    """
    r, T, _, _ = shape.derivatives(x)
    eps = shape.epsilon
    g, gc, P, q = (space_metric(shape, x)[0],) + vector_laplacian_coefficients(shape, x)
    G = christoffel(shape, x)
    pi = G + np.einsum("i,kj->kij", _I3[1], _I3)[(None,) * r.ndim] / r[..., None, None, None]
    a_det = 1 + r * r * np.sum(T * T, -1)
    eta_vec = np.concatenate([-T / eps, (a_det / (r * eps) ** 2)[..., None]], -1)
    phi = np.zeros(r.shape + (3, 2))
    phi[..., :2, :2] = np.eye(2)
    phi[..., 2, :] = -T / eps
    alpha = 2 * nu * a_det / (r**2 * eps**2 * tau**2)
    dg = metric_derivative(shape, x)
    L_beta = nu * np.moveaxis(dg, -1, -3) - nu * np.einsum("...im,...mbj->...bij", g, P[..., :, :2, :])
    L = alpha[..., None, None] * g - nu * np.einsum("...im,...mj->...ij", g, q)
    Pi_caps = pi + np.einsum("i,kj->kij", _I3[2], _I3)[(None,) * r.ndim] / tau
    return OperatorCoefficients(
        P_beta=P[..., :, :2, :],
        P_3=P[..., :, 2, :],
        q=q,
        pi=pi,
        phi_coupling=phi,
        eta_vec=eta_vec,
        l_coeffs={"grad": P[..., :, :2, :], "zero": q},
        l_xi_coeffs={"dxi": gc[..., 2, 2], "grad": 2 * gc[..., 2, :2], "zero": P[..., :, 2, :]},
        L_beta=L_beta,
        L=L,
        Pi_caps=Pi_caps,
        alpha_tau=alpha,
        g_cov=g,
        g_con=gc,
    )


def convection(shape, x, w, dw):
    """``w^j nabla_j w^k`` from the full derivative table ``dw[..., k, i]``."""
    G = christoffel(shape, x)
    return np.einsum("...j,...kj->...k", w, dw) + np.einsum("...kjm,...j,...m->...k", G, w, w)


def conservative_convection(shape, x, w, dw, pi=None):
    """``d_b(w^b w^k) + d_xi(w^3 w^k) + pi^k_ij w^i w^j``."""
    if pi is None:
        r = np.asarray(x, float)[..., 1]
        pi = christoffel(shape, x) + np.einsum("i,kj->kij", _I3[1], _I3)[(None,) * r.ndim] / r[..., None, None, None]
    div_flat = dw[..., 0, 0] + dw[..., 1, 1] + dw[..., 2, 2]
    return (
        np.einsum("...j,...kj->...k", w, dw)
        + w * div_flat[..., None]
        + np.einsum("...kij,...i,...j->...k", pi, w, w)
    )


def strain_split(shape, x, w, grad_w, dxi_w):
    """Strain tensor ``e = phi + psi`` with ``phi`` the Theta-free part."""
    w = np.asarray(w, float)
    grad_w = np.asarray(grad_w, float)
    dxi_w = np.asarray(dxi_w, float)
    r = np.asarray(x, float)[..., 1]
    eps = shape.epsilon
    g, _, _ = space_metric(shape, x)
    nab, _ = covariant_derivatives(shape, x, w, grad_w, dxi_w)
    low = np.einsum("...jk,...ik->...ij", g, nab)  # nabla_i w_j
    e = 0.5 * (low + np.swapaxes(low, -1, -2))
    phi = np.zeros_like(e)
    phi[..., :2, :2] = 0.5 * (grad_w[..., :2, :2] + np.swapaxes(grad_w[..., :2, :2], -1, -2))
    er2 = (eps * r) ** 2
    side = 0.5 * (dxi_w[..., :2] + er2[..., None] * grad_w[..., 2, :])
    phi[..., 2, :2] = side
    phi[..., :2, 2] = side
    phi[..., 2, 2] = er2 * (dxi_w[..., 2] + w[..., 1] / r)
    return phi, e - phi, e


def dissipation_density(shape, x, w, grad_w, dxi_w, nu):
    """Dissipation function ``A^{ijkm} e_ij e_km`` with ``lambda = -2/3 mu``."""
    _, gc, _ = space_metric(shape, x)
    _, _, e = strain_split(shape, x, w, grad_w, dxi_w)
    e_up = np.einsum("...ik,...jm,...km->...ij", gc, gc, e)
    ee = np.einsum("...ij,...ij->...", e_up, e)
    tr = np.einsum("...ij,...ij->...", gc, e)
    return 2 * nu * ee - (2.0 / 3.0) * nu * tr * tr


# ---------------------------------------------------------------------------
# surface update and compatibility


@dataclass(frozen=True)
class DisplacementField:
    """Displacement ``eta = eta^a e_a + eta^3 n`` of a surface.

    ``cov1[..., i, a]`` holds the shifted covariant derivatives
    (``nabla0_a eta^l`` for i < 2 and ``nabla0_a eta^3`` for i = 2) and
    ``cov2[..., i, a, b]`` their surface-covariant derivative ``nabla*_b``.
    """

    eta: np.ndarray
    cov1: np.ndarray
    cov2: np.ndarray


@dataclass(frozen=True)
class UpdatedForms:
    a_cov: np.ndarray
    b_cov: np.ndarray
    strain: np.ndarray  # E0
    rho: np.ndarray
    remainder: np.ndarray  # Q2
    d0: np.ndarray


def surface_update(forms, disp: DisplacementField, floor=1e-10):
    """Fundamental forms of the displaced surface.

    ``forms`` is a mapping with ``a`` (a_cov), ``b`` (b_cov), ``gamma``
    (surface Christoffel symbols) and ``b_mixed`` (b^s_b).  The metric update
    is exact; the curvature update is evaluated exactly in a local frame and
    its departure from the linear part ``b + rho`` is returned as the
    quadratic remainder.
    """
    a = np.asarray(forms["a"], float)
    b = np.asarray(forms["b"], float)
    bm = np.asarray(forms["b_mixed"], float)
    N1 = np.asarray(disp.cov1, float)
    N2 = np.asarray(disp.cov2, float)
    lin = np.einsum("...bl,...la->...ab", a, N1[..., :2, :])
    gamma = 0.5 * (lin + np.swapaxes(lin, -1, -2))
    quad = np.einsum("...ls,...la,...sb->...ab", a, N1[..., :2, :], N1[..., :2, :]) + N1[..., 2, :, None] * N1[..., 2, None, :]
    E0 = gamma + 0.5 * quad
    a_new = a + 2 * E0
    # rho_ab = nabla*_a nabla0_b eta^3 + b_as nabla0_b eta^s
    rho = np.swapaxes(N2[..., 2, :, :], -1, -2) + np.einsum("...as,...sb->...ab", b, N1[..., :2, :])
    # local orthonormal realisation of the frame: a_l = columns of chol(a)^T, n = e_z
    L = np.linalg.cholesky(a)
    frame = np.zeros(a.shape[:-2] + (2, 3))
    frame[..., :, :2] = L  # row l holds the vector a_l
    nvec = np.zeros(a.shape[:-2] + (3,))
    nvec[..., 2] = 1.0
    F = np.eye(2) + N1[..., :2, :]  # F[l, a]
    At = np.einsum("...la,...lc->...ac", F, frame) + N1[..., 2, :, None] * nvec[..., None, :]
    cr = np.cross(At[..., 0, :], At[..., 1, :])
    area = np.linalg.norm(cr, axis=-1)
    d0 = area / np.sqrt(np.linalg.det(a))
    if np.any(np.abs(d0) < floor):
        raise DegenerateUpdate("displaced surface degenerates (area ratio below floor)")
    nt = cr / area[..., None]
    # derivative of At_a along b with Christoffel parts dropped (orthogonal to nt)
    tang = N2[..., :2, :, :] - N1[..., 2, None, :, None] * bm[..., :, None, :]  # [mu, a, b]
    norm = np.einsum("...la,...lb->...ab", F, b) + N2[..., 2, :, :]
    dA = np.einsum("...mab,...mc->...abc", tang, frame) + norm[..., None] * nvec[..., None, None, :]
    b_new = np.einsum("...c,...abc->...ab", nt, dA)
    b_new = 0.5 * (b_new + np.swapaxes(b_new, -1, -2))
    Q2 = b_new - b - rho
    return UpdatedForms(a_new, b_new, E0, rho, Q2, d0)


def _cd(f, axis, h):
    return (np.roll(f, -1, axis) - np.roll(f, 1, axis)) / (2 * h)


def gauss_codazzi_residual(a_field, b_field, step):
    """Max-norm Gauss and Codazzi residuals of forms sampled on a grid.

    ``a_field`` and ``b_field`` have shape ``(nz, nr, 2, 2)`` on a uniform grid
    with spacing ``step`` (scalar or pair).  Centered differences are used and
    the two outermost rings are dropped from the norm.
    """
    a = np.asarray(a_field, float)
    b = np.asarray(b_field, float)
    hz, hr = (step, step) if np.isscalar(step) else step
    hs = (hz, hr)
    da = np.stack([_cd(a, 0, hz), _cd(a, 1, hr)], -1)  # d_c a_ab -> [..., a, b, c]
    ai = np.linalg.inv(a)
    # first kind: low[..., i, j, k] = 1/2 (d_j a_ik + d_k a_ij - d_i a_jk)
    low = 0.5 * (
        np.einsum("...ikj->...ijk", da) + np.einsum("...ijk->...ijk", da) - np.einsum("...jki->...ijk", da)
    )
    Gs = np.einsum("...li,...ijk->...ljk", ai, low)  # Gamma^l_{jk}
    dG = np.stack([_cd(Gs, 0, hz), _cd(Gs, 1, hr)], -1)  # [..., l, j, k, m]
    # R^l_{jkm} = d_k G^l_{jm} - d_m G^l_{jk} + G^l_{kp} G^p_{jm} - G^l_{mp} G^p_{jk}
    Rl = (
        np.einsum("...ljmk->...ljkm", dG)
        - dG
        + np.einsum("...lkp,...pjm->...ljkm", Gs, Gs)
        - np.einsum("...lmp,...pjk->...ljkm", Gs, Gs)
    )
    R1212 = np.einsum("...l,...l->...", a[..., 0, :], Rl[..., :, 1, 0, 1])
    detb = b[..., 0, 0] * b[..., 1, 1] - b[..., 0, 1] ** 2
    gauss = R1212 - detb
    db = np.stack([_cd(b, 0, hz), _cd(b, 1, hr)], -1)  # d_c b_ab -> [..., a, b, c]
    # nabla_c b_ab = d_c b_ab - G^l_{ca} b_lb - G^l_{cb} b_al
    nb = db - np.einsum("...lca,...lb->...abc", Gs, b) - np.einsum("...lcb,...al->...abc", Gs, b)
    cod = nb[..., :, :, 1][..., 0, :] - nb[..., :, :, 0][..., 1, :]  # nabla_2 b_1g - nabla_1 b_2g
    sl = (slice(2, -2), slice(2, -2))
    return {"gauss": float(np.max(np.abs(gauss[sl]))), "codazzi": float(np.max(np.abs(cod[sl])))}


def forms_on_grid(shape, z_range, r_range, n):
    """Sample ``(a_cov, b_cov)`` on an ``n x n`` grid; returns forms and spacing."""
    zs = np.linspace(*z_range, n)
    rs = np.linspace(*r_range, n)
    Z, R = np.meshgrid(zs, rs, indexing="ij")
    x = np.stack([Z, R], -1)
    a_cov, _, _ = surface_metric(shape, x)
    sf = second_fundamental(shape, x)
    return a_cov, sf.b_cov, (zs[1] - zs[0], rs[1] - rs[0])


# ---------------------------------------------------------------------------
# bundle


@dataclass(frozen=True)
class MetricBundle:
    a_cov: np.ndarray
    a_con: np.ndarray
    a_det: np.ndarray
    g_cov: np.ndarray
    g_con: np.ndarray
    g_det: np.ndarray
    christoffel: np.ndarray
    b_cov: np.ndarray
    c_cov: np.ndarray
    b_inv: Optional[np.ndarray]
    c_inv: Optional[np.ndarray]
    mean_curv: np.ndarray
    gauss_curv: np.ndarray
    normal: np.ndarray
    normal_cart: np.ndarray
    perm3: np.ndarray
    perm2: np.ndarray
    singular: np.ndarray


def permutation_tensors(g_det, a_det):
    """Covariant permutation tensors scaled by the metric volume factors."""
    p3 = np.zeros((3, 3, 3))
    for (i, j, k), s in {(0, 1, 2): 1, (1, 2, 0): 1, (2, 0, 1): 1, (0, 2, 1): -1, (2, 1, 0): -1, (1, 0, 2): -1}.items():
        p3[i, j, k] = s
    p2 = np.array([[0.0, 1.0], [-1.0, 0.0]])
    return np.sqrt(g_det)[..., None, None, None] * p3, np.sqrt(a_det)[..., None, None] * p2


def metric_bundle(shape, x, xi=0.0):
    a_cov, a_con, a_det = surface_metric(shape, x)
    g, gc, gd = space_metric(shape, x)
    sf = second_fundamental(shape, x)
    n_con, n_cart = unit_normal(shape, x, xi)
    p3, p2 = permutation_tensors(gd, a_det)
    return MetricBundle(
        a_cov, a_con, a_det, g, gc, gd, christoffel(shape, x), sf.b_cov, sf.c_cov, sf.b_inv, sf.c_inv,
        sf.mean_curv, sf.gauss_curv, n_con, n_cart, p3, p2, sf.singular,
    )
