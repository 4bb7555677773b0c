"""Rotational average over the passage and the reduced model it produces.

``M(phi) = 1/2 int_{-1}^{1} phi dxi`` is evaluated with the trapezoidal rule
on the uniform stack partition, so it acts on arrays whose leading axis runs
over the ``m + 1`` surfaces ``xi_0 = -1, ..., xi_m = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .fem import Space, at_quadrature, element_data
from .layer import IterationPolicy, LayerGeometry, LayerProblem, solve_layer


def trapezoid_weights(m):
    w = np.full(m + 1, 2.0 / m)
    w[[0, -1]] *= 0.5
    return 0.5 * w


def average(values, axis=0):
    """Discrete ``M`` along ``axis`` (which must hold all m + 1 surfaces)."""
    v = np.asarray(values, float)
    m = v.shape[axis] - 1
    if m < 1:
        raise ValueError("averaging needs at least two surfaces")
    return np.tensordot(trapezoid_weights(m), np.moveaxis(v, axis, 0), axes=(0, 0))


def fluctuation(values, axis=0):
    v = np.asarray(values, float)
    return v - np.expand_dims(average(v, axis), axis)


def xi_derivative(values, tau, axis=0):
    """Second-order quotients along the stack (one-sided at the faces)."""
    return np.gradient(np.asarray(values, float), tau, axis=axis, edge_order=2)


def verify_average_identities(space: Space, w_stack, dxi_w3=None, order=None):
    """Residuals of ``M(div w) = div2(M w)``, ``M(w~) = 0`` and ``M(w~ . w_bar) = 0``.

    ``w_stack`` has shape ``(m + 1, 3, n)`` (FE coefficients per surface).
    ``dxi_w3`` optionally gives ``d_xi w^3`` at the quadrature points, shape
    ``(m + 1, nt, nq)``; otherwise stack quotients are used.
    """
    w_stack = np.asarray(w_stack, float)
    m = w_stack.shape[0] - 1
    tau = 2.0 / m
    ed = element_data(space, order or 2 * space.degree + 2)
    vals, grads = at_quadrature(space, w_stack, ed)  # (m+1, 3, nt, nq), (..., 2)
    r = ed.x[..., 1]
    div2 = grads[:, 0, ..., 0] + grads[:, 1, ..., 1] + vals[:, 1] / r
    if dxi_w3 is None:
        dxi_w3 = xi_derivative(vals[:, 2], tau)
    lhs = average(div2 + dxi_w3)
    wbar = average(w_stack)
    vb, gb = at_quadrature(space, wbar, ed)
    rhs = gb[0, ..., 0] + gb[1, ..., 1] + vb[1] / r
    wt = fluctuation(w_stack)
    prod = np.einsum("kcn,cn->kn", wt, wbar)
    return {
        "div_identity": float(np.max(np.abs(lhs - rhs))),
        "mean_fluctuation": float(np.max(np.abs(average(wt)))),
        "mean_product": float(np.max(np.abs(average(prod)))),
    }


@dataclass
class Closure:
    """Jump and fluctuation data of the reduced model at quadrature points.

    ``p_jump`` is ``p(1) - p(-1)``, ``dxi_w_jump`` is ``[d_xi w]`` (components
    last) and ``fluct`` the covariant fluctuation term
    ``g_mk M(d_l(w~^l w~^k) + pi^k_ij w~^i w~^j)``.
    """

    p_jump: Optional[np.ndarray] = None
    dxi_w_jump: Optional[np.ndarray] = None
    fluct: Optional[np.ndarray] = None
    jump_scale: float = 0.5


def closure_load(geom: LayerGeometry, closure: Closure, nu):
    """Covariant load ``s (nu g^33 g_mk [d_xi w^k] - delta_3m [p]) - fluct``."""
    out = np.zeros(geom.r.shape + (3,))
    s = closure.jump_scale
    if closure.dxi_w_jump is not None:
        out += s * nu * geom.gc[..., 2, 2, None] * np.einsum("...mk,...k->...m", geom.g, closure.dxi_w_jump)
    if closure.p_jump is not None:
        out[..., 2] -= s * np.asarray(closure.p_jump, float)
    if closure.fluct is not None:
        out -= closure.fluct
    return out


def stack_closure(geom: LayerGeometry, w_stack, p_faces=None, jump_scale=0.5):
    """Closure computed from a stack of surface velocities (m + 1, 3, n).

    ``p_faces`` is the pair of face pressures ``(p(-1), p(1))`` as coefficient
    arrays in the pressure space.
    """
    w_stack = np.asarray(w_stack, float)
    m = w_stack.shape[0] - 1
    tau = 2.0 / m
    ed = geom.ed
    vals, grads = at_quadrature(geom.vspace, w_stack, ed)  # (m+1, 3, nt, nq[, 2])
    vals = np.moveaxis(vals, 1, -1)
    grads = np.moveaxis(grads, 1, -2)  # (m+1, nt, nq, 3, 2)
    wt = fluctuation(vals)
    gt = fluctuation(grads)
    # d_l(w~^l w~^k) = (d_l w~^l) w~^k + w~^l d_l w~^k
    divt = gt[..., 0, 0] + gt[..., 1, 1]
    term = divt[..., None] * wt + np.einsum("...l,...kl->...k", wt[..., :2], gt)
    r = geom.r
    pi = geom.G + np.einsum("i,kj->kij", np.eye(3)[1], np.eye(3))[None, None] / r[..., None, None, None]
    term = term + np.einsum("...kij,...i,...j->...k", pi, wt, wt)
    fluct = np.einsum("...mk,...k->...m", geom.g, average(term))
    dxi = xi_derivative(vals, tau)
    jump = dxi[-1] - dxi[0]
    p_jump = None
    if p_faces is not None:
        from .layer import _quad

        p_jump = _quad(geom, p_faces[1], True)[0] - _quad(geom, p_faces[0], True)[0]
    return Closure(p_jump, jump, fluct, jump_scale)


@dataclass
class AveragedState:
    w: np.ndarray
    p: np.ndarray
    iterations: int
    converged: bool
    history: list


def reduced_problem(geom: LayerGeometry, nu=1.0, eta=1e-6, forcing=None, closure: Closure = None, **kw):
    load = None
    if closure is not None:
        arr = closure_load(geom, closure, nu)
        load = lambda x, arr=arr: arr
    return LayerProblem(geom, nu=nu, eta=eta, forcing=forcing, load=load, transverse=False, **kw)


def solve_reduced(geom: LayerGeometry, nu=1.0, eta=1e-6, forcing=None, closure: Closure = None,
                  policy: IterationPolicy = None, **kw):
    """Averaged 2D-3C problem: the layer problem without transverse terms."""
    st = solve_layer(reduced_problem(geom, nu, eta, forcing, closure, **kw), policy)
    return AveragedState(st.w, st.p, st.iterations, st.converged, st.history)
