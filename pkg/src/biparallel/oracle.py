"""Finite-difference validation oracle built only on the embedding map.

Nothing here uses the closed forms of :mod:`biparallel.geometry` other than
``embed``.  Derivatives are two-level Richardson extrapolations of centered
differences with base step ``1e-3 * max(1, |q_i|)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StepTooLarge
from .geometry import embed


@dataclass
class OracleBundle:
    basis: np.ndarray
    g_cov: np.ndarray
    g_con: np.ndarray
    g_det: np.ndarray
    a_cov: np.ndarray
    a_con: np.ndarray
    a_det: np.ndarray
    christoffel: np.ndarray
    normal_cart: np.ndarray
    normal: np.ndarray
    b_cov: np.ndarray
    c_cov: np.ndarray
    mean_curv: np.ndarray
    gauss_curv: np.ndarray
    diagnostic: float


class _Diff:
    def __init__(self, base, tol):
        self.base = base
        self.tol = tol
        self.worst = 0.0

    def __call__(self, f, q, i):
        q = np.asarray(q, float)
        h = self.base * np.maximum(1.0, np.abs(q[..., i]))
        e = np.zeros(3)
        e[i] = 1.0

        def central(s):
            step = (s * h)[..., None]
            fp, fm = f(q + step * e), f(q - step * e)
            hh = (s * h).reshape(h.shape + (1,) * (fp.ndim - h.ndim))
            return (fp - fm) / (2 * hh)

        d1, d2 = central(1.0), central(0.5)
        est = (4 * d2 - d1) / 3
        diag = float(np.max(np.abs(d2 - d1)) / max(1.0, float(np.max(np.abs(est)))))
        self.worst = max(self.worst, diag)
        if diag > self.tol:
            raise StepTooLarge(f"extrapolation diagnostic {diag:.3e} exceeds {self.tol:.1e}")
        return est


def _qpoint(x, xi):
    x = np.asarray(x, float)
    xi = np.broadcast_to(np.asarray(xi, float), x.shape[:-1])
    return np.concatenate([x, xi[..., None]], -1)


def fd_oracle(shape, x, xi=0.0, base=1e-3, tol=1e-3):
    """Metric, Christoffel symbols, normal and curvatures by differencing ``embed``."""
    D = _Diff(base, tol)
    X = lambda q: embed(shape, q[..., :2], q[..., 2])

    def basis(q):
        return np.stack([D(X, q, i) for i in range(3)], -2)

    def metric(q):
        E = basis(q)
        return np.einsum("...ic,...jc->...ij", E, E)

    q = _qpoint(x, xi)
    E = basis(q)
    g = np.einsum("...ic,...jc->...ij", E, E)
    gc = np.linalg.inv(g)
    dg = np.stack([D(metric, q, l) for l in range(3)], -1)  # d_l g_ij -> [..., i, j, l]
    first = 0.5 * (np.einsum("...klj->...jkl", dg) + np.einsum("...jlk->...jkl", dg) - np.einsum("...jkl->...jkl", dg))
    Gam = np.einsum("...il,...jkl->...ijk", gc, first)
    cr = np.cross(E[..., 0, :], E[..., 1, :])
    n = cr / np.linalg.norm(cr, axis=-1)[..., None]
    n_con = np.einsum("...ij,...jc,...c->...i", gc, E, n)
    dE = np.stack([D(lambda qq: basis(qq)[..., :2, :], q, a) for a in range(2)], -3)  # [..., a, b, c]
    b = np.einsum("...c,...abc->...ab", n, dE)
    a = g[..., :2, :2]
    ai = np.linalg.inv(a)
    ad = np.linalg.det(a)
    c = np.einsum("...ls,...al,...bs->...ab", ai, b, b)
    H = 0.5 * np.einsum("...ab,...ab->...", ai, b)
    K = np.linalg.det(b) / ad
    return OracleBundle(E, g, gc, np.linalg.det(g), a, ai, ad, Gam, n, n_con, b, c, H, K, D.worst)


def trace_laplacian(shape, field, x, xi, base=1e-3, tol=1e-2):
    """Vector Laplacian of a contravariant field by an independent route.

    The cartesian components of ``field`` (a callable ``q -> w^i`` with
    ``q = (z, r, xi)``) are scalars in flat space, so each is passed through
    the scalar Laplace-Beltrami operator
    ``(1/sqrt g) d_i (sqrt g g^{ij} d_j f)`` with a differenced metric; the
    result is mapped back to contravariant components with the dual basis.
    """
    D = _Diff(base, tol)
    X = lambda q: embed(shape, q[..., :2], q[..., 2])

    def basis(q):
        return np.stack([D(X, q, i) for i in range(3)], -2)

    def cart(q):
        return np.einsum("...i,...ic->...c", field(q), basis(q))

    def flux(q):
        E = basis(q)
        g = np.einsum("...ic,...jc->...ij", E, E)
        sg = np.sqrt(np.linalg.det(g))
        grad = np.stack([D(cart, q, j) for j in range(3)], -2)  # [..., j, c]
        return sg[..., None, None] * np.einsum("...ij,...jc->...ic", np.linalg.inv(g), grad)

    q = _qpoint(x, xi)
    E = basis(q)
    g = np.einsum("...ic,...jc->...ij", E, E)
    sg = np.sqrt(np.linalg.det(g))
    lap = sum(D(lambda qq, i=i: flux(qq)[..., i, :], q, i) for i in range(3)) / sg[..., None]
    dual = np.einsum("...ij,...jc->...ic", np.linalg.inv(g), E)
    return np.einsum("...ic,...c->...i", dual, lap)
