"""Geometry self-checks shared by the CLI and the test-suite.

Closed forms are compared with the finite-difference oracle built from the
embedding alone; exact identities are evaluated on random samples.
"""

from __future__ import annotations

import numpy as np

from . import geometry as geo
from .oracle import fd_oracle

QUANTITIES = ("g_cov", "g_con", "christoffel", "normal", "normal_cart", "b_cov", "mean_curv", "gauss_curv")


def random_shape(rng, kind=None):
    kind = kind or rng.choice(["flat", "linear-wrap", "log-spiral"])
    n = int(rng.integers(2, 13))
    omega = float(rng.uniform(0.0, 2.0))
    if kind == "flat":
        return geo.flat(n, omega)
    return geo.preset(kind, c=float(rng.uniform(0.1, 1.0)), n_blades=n, omega=omega)


def random_points(rng, n, z_range=(0.0, 1.0), r_range=(1.0, 2.0)):
    x = np.column_stack([rng.uniform(*z_range, n), rng.uniform(*r_range, n)])
    return x, rng.uniform(-1.0, 1.0, n)


def _rel(a, b):
    """Max-norm difference relative to the oracle magnitude (unit floor)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), 1.0))


def oracle_errors(shape, x, xi):
    """Relative errors of every closed form against the oracle at one point."""
    mb = geo.metric_bundle(shape, x, xi)
    ob = fd_oracle(shape, x, xi)
    return {q: _rel(getattr(mb, q), getattr(ob, q)) for q in QUANTITIES}


def oracle_report(shapes_points):
    """Worst relative error per quantity over ``(shape, x, xi)`` triples."""
    worst = dict.fromkeys(QUANTITIES, 0.0)
    for shape, x, xi in shapes_points:
        for q, e in oracle_errors(shape, x, xi).items():
            worst[q] = max(worst[q], e)
    return worst


def identity_residuals(shape, x, xi, rng=None):
    """Exact algebraic identities; all residuals should sit at roundoff."""
    rng = rng or np.random.default_rng(0)
    x = np.asarray(x, float)
    r = x[..., 1]
    g, gc, gd = geo.space_metric(shape, x)
    eps = shape.epsilon
    n_con, n_cart = geo.unit_normal(shape, x, xi)
    w = rng.standard_normal(x.shape[:-1] + (3,))
    C = geo.coriolis(shape, x, w)
    om = geo.angular_velocity(shape, x)
    ident = np.einsum("...ij,...jk->...ik", g, gc) - np.eye(3)
    return {
        "det_g": float(np.max(np.abs(gd - (eps * r) ** 2) / (eps * r) ** 2)),
        "g_inverse": float(np.max(np.abs(ident))),
        "normal_unit": float(np.max(np.abs(np.einsum("...i,...ij,...j->...", n_con, g, n_con) - 1.0))),
        "normal_cart_unit": float(np.max(np.abs(np.sum(n_cart**2, -1) - 1.0))),
        "coriolis_orthogonal": float(np.max(np.abs(np.einsum("...i,...ij,...j->...", C, g, w))
                                            / np.maximum(1.0, np.abs(C).max(-1) * np.abs(w).max(-1)))),
        "omega_norm": float(np.max(np.abs(np.einsum("...i,...ij,...j->...", om, g, om) - shape.omega**2))),
    }


def geometry_report(shape, samples=20, seed=0, z_range=(0.0, 1.0), r_range=(1.0, 2.0)):
    """Oracle comparison and identity residuals for one shape."""
    rng = np.random.default_rng(seed)
    x, xi = random_points(rng, samples, z_range, r_range)
    oracle = oracle_report((shape, x[i], xi[i]) for i in range(samples))
    ident = identity_residuals(shape, x, xi, rng)
    return {"shape": shape.name, "samples": samples, "oracle": oracle, "identities": ident}
