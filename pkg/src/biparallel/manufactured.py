"""Manufactured exact solutions and the forcing that reproduces them.

Fields are sympy expressions in ``z, r, xi``; derivatives are exact and are
lambdified for vectorised evaluation at arrays of parameter points.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import sympy as sp

from . import geometry as geo

Z, R, XI = sp.symbols("z r xi", real=True)
_V = (Z, R, XI)


def _lam(expr):
    f = sp.lambdify(_V, expr, "numpy")
    return lambda z, r, xi: np.broadcast_to(np.asarray(f(z, r, xi), float), np.broadcast(z, r, xi).shape)


@dataclass
class Manufactured:
    """Exact velocity (contravariant) and pressure given as sympy expressions."""

    w: tuple
    p: object
    name: str = "manufactured"

    @cached_property
    def _fns(self):
        w = [sp.sympify(e) for e in self.w]
        p = sp.sympify(self.p)
        return {
            "w": [_lam(e) for e in w],
            "dw": [[_lam(sp.diff(e, a)) for a in _V] for e in w],
            "d2w": [[[_lam(sp.diff(e, a, b)) for b in _V] for a in _V] for e in w],
            "p": _lam(p),
            "dp": [_lam(sp.diff(p, a)) for a in _V],
            "d2p": [[_lam(sp.diff(p, a, b)) for b in _V] for a in _V],
        }

    def evaluate(self, x, xi):
        """Arrays ``w, dw[k, i], d2w[k, i, j], p, dp[i], d2p[i, j]`` at points."""
        x = np.asarray(x, float)
        z, r = x[..., 0], x[..., 1]
        xi = np.broadcast_to(np.asarray(xi, float), z.shape)
        f = self._fns
        ev = lambda fn: fn(z, r, xi)
        return {
            "w": np.stack([ev(a) for a in f["w"]], -1),
            "dw": np.stack([np.stack([ev(a) for a in row], -1) for row in f["dw"]], -2),
            "d2w": np.stack([np.stack([np.stack([ev(a) for a in c], -1) for c in row], -2) for row in f["d2w"]], -3),
            "p": ev(f["p"]),
            "dp": np.stack([ev(a) for a in f["dp"]], -1),
            "d2p": np.stack([np.stack([ev(a) for a in row], -1) for row in f["d2p"]], -2),
        }

    def velocity(self, xi):
        return lambda x: self.evaluate(x, xi)["w"]

    def velocity_grad(self, xi):
        return lambda x: self.evaluate(x, xi)["dw"][..., :2]

    def pressure(self, xi):
        return lambda x: self.evaluate(x, xi)["p"]

    def pressure_grad(self, xi):
        return lambda x: self.evaluate(x, xi)["dp"][..., :2]


def momentum_operator(shape, x, ev, nu, centrifugal=True):
    """Contravariant ``-nu Lap w + w.grad w + C(w) + grad p - R`` from exact derivatives."""
    _, gc, _ = geo.space_metric(shape, x)
    lap = geo.vector_laplacian(shape, x, ev["w"], ev["dw"], ev["d2w"])
    conv = geo.convection(shape, x, ev["w"], ev["dw"])
    out = -nu * lap + conv + geo.coriolis(shape, x, ev["w"]) + np.einsum("...kj,...j->...k", gc, ev["dp"])
    if centrifugal and shape.omega:
        out = out - geo.centrifugal(shape, x)
    return out


def forcing_3d(man: Manufactured, shape, nu, xi, centrifugal=True):
    """Body force on the surface ``xi`` for which ``man`` solves the 3D equations."""
    return lambda x: momentum_operator(shape, x, man.evaluate(x, xi), nu, centrifugal)


def traction(man: Manufactured, shape, nu, xi):
    """Covariant traction ``nu g_ik d_n w^k - p n_i`` on inlet/outlet edges."""

    def h(x, normal):
        ev = man.evaluate(x, xi)
        g, _, _ = geo.space_metric(shape, x)
        dn = np.einsum("...kl,...l->...k", ev["dw"][..., :2], normal)
        out = nu * np.einsum("...ik,...k->...i", g, dn)
        out[..., :2] -= ev["p"][..., None] * normal
        return out

    return h


def divergence_2d(man: Manufactured, xi):
    """``div2 w = d_a w^a + w^2 / r``."""

    def d(x):
        ev = man.evaluate(x, xi)
        return ev["dw"][..., 0, 0] + ev["dw"][..., 1, 1] + ev["w"][..., 1] / np.asarray(x)[..., 1]

    return d


def layer_forcing(man: Manufactured, shape, nu, xi, tau, centrifugal=True):
    """Body force for which ``man`` restricted to ``xi`` solves the layer problem.

    Transverse derivatives are replaced by the same central quotients of the
    exact neighbour traces that the layer solver uses, so the restriction is
    an exact solution of the semi-discrete problem.
    """

    def f(x):
        e0 = man.evaluate(x, xi)
        em, ep = man.evaluate(x, xi - tau), man.evaluate(x, xi + tau)
        _, gc, _ = geo.space_metric(shape, x)
        _, P, q = geo.vector_laplacian_coefficients(shape, x)
        G = geo.christoffel(shape, x)
        w = e0["w"]
        d1 = (ep["w"] - em["w"]) / (2 * tau)
        d1g = (ep["dw"][..., :2] - em["dw"][..., :2]) / (2 * tau)
        d2 = (ep["w"] - 2 * w + em["w"]) / tau**2
        lap = (
            e0["d2w"][..., 0, 0] + e0["d2w"][..., 1, 1]
            + gc[..., 2, 2, None] * d2
            + 2 * np.einsum("...b,...kb->...k", gc[..., 2, :2], d1g)
            + np.einsum("...kbm,...mb->...k", P[..., :, :2, :], e0["dw"][..., :2])
            + np.einsum("...km,...m->...k", P[..., :, 2, :], d1)
            + np.einsum("...km,...m->...k", q, w)
        )
        conv = (
            np.einsum("...l,...kl->...k", w[..., :2], e0["dw"][..., :2])
            + w[..., 2, None] * d1
            + np.einsum("...kjm,...j,...m->...k", G, w, w)
        )
        dp = np.concatenate([e0["dp"][..., :2], ((ep["p"] - em["p"]) / (2 * tau))[..., None]], -1)
        out = -nu * lap + conv + geo.coriolis(shape, x, w) + np.einsum("...kj,...j->...k", gc, dp)
        if centrifugal and shape.omega:
            out = out - geo.centrifugal(shape, x)
        return out

    return f


def solenoidal_field(amp_psi=1.0, amp_phi=1.0, pressure=None, r_range=(1.0, 2.0)):
    """Divergence-free field vanishing on the walls and on both blade faces.

    ``w^1 = (1/r) d_r psi + d_xi phi``, ``w^2 = -(1/r) d_z psi``,
    ``w^3 = -d_z phi`` satisfies ``d_a w^a + w^2/r + d_xi w^3 = 0`` for any
    wrap function.
    """
    r0, r1 = r_range
    B = amp_psi * (R - r0) ** 2 * (r1 - R) ** 2 * sp.cos(sp.pi * Z)
    A = amp_phi * (R - r0) * (r1 - R) * sp.sin(sp.pi * Z)
    psi = (1 - XI**2) * B
    phi = (1 - XI**2) ** 2 * A
    w = (sp.diff(psi, R) / R + sp.diff(phi, XI), -sp.diff(psi, Z) / R, -sp.diff(phi, Z))
    if pressure is None:
        pressure = sp.Rational(1, 10) * sp.cos(sp.pi * Z) * R * (1 + XI**2 / 2)
    return Manufactured(tuple(sp.simplify(e) for e in w), pressure, "solenoidal")


def smooth_field(amp=1.0):
    """Generic smooth (not solenoidal) field for single-layer tests."""
    w = (
        amp * sp.sin(sp.pi * Z) * (R - 1) * (2 - R) * (1 + XI / 2),
        amp * sp.cos(sp.pi * Z / 2) * (R - 1) * (2 - R) * (1 - XI**2),
        amp * sp.sin(sp.pi * R) * sp.cos(sp.pi * Z) * (1 + XI**2),
    )
    p = amp * (sp.cos(sp.pi * Z) * sp.sin(sp.pi * R / 2) + XI * Z)
    return Manufactured(w, p, "smooth")
