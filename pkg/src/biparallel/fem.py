"""Lagrange finite elements on triangulations: quadrature, spaces, assembly.

Assembly is fully vectorised over elements.  Local arrays are scattered into
COO triplets in element order and summed into CSR, which fixes the reduction
order and therefore gives bit-identical matrices for identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AssemblyFailure, SingularElement
from .mesh import Locator, Triangulation


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class Quadrature:
    order: int
    points: np.ndarray  # (nq, 2) reference coordinates
    weights: np.ndarray  # (nq,), sum 1/2


@lru_cache(maxsize=None)
def triangle_quadrature(order):
    """Collapsed Gauss rule on the reference triangle, exact to ``order``."""
    n = max(1, int(np.ceil((order + 2) / 2)))
    x, w = np.polynomial.legendre.leggauss(n)
    u, wu = 0.5 * (x + 1), 0.5 * w
    U, V = np.meshgrid(u, u, indexing="ij")
    W = np.outer(wu, wu) * (1 - U)
    pts = np.column_stack([U.ravel(), (V * (1 - U)).ravel()])
    return Quadrature(order, pts, W.ravel())


@lru_cache(maxsize=None)
def line_quadrature(order):
    """Gauss rule on [0, 1]."""
    n = max(1, int(np.ceil((order + 1) / 2)))
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1), 0.5 * w


# ---------------------------------------------------------------------------
# reference basis


def _bary(pts):
    pts = np.atleast_2d(pts)
    return np.column_stack([1 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])


_DL = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # grad of barycentrics
_EDGES = ((0, 1), (1, 2), (2, 0))


def reference_basis(degree, pts):
    """Values (nq, nloc) and reference gradients (nq, nloc, 2)."""
    L = _bary(pts)
    if degree == 1:
        return L, np.broadcast_to(_DL, (len(L), 3, 2)).copy()
    vals = [L[:, i] * (2 * L[:, i] - 1) for i in range(3)]
    grads = [(4 * L[:, i] - 1)[:, None] * _DL[i] for i in range(3)]
    for i, j in _EDGES:
        vals.append(4 * L[:, i] * L[:, j])
        grads.append(4 * (L[:, j, None] * _DL[i] + L[:, i, None] * _DL[j]))
    return np.column_stack(vals), np.stack(grads, 1)


# ---------------------------------------------------------------------------
# spaces


class Space:
    """Continuous Lagrange space of degree 1 or 2 on a triangulation."""

    def __init__(self, mesh: Triangulation, degree=2):
        if degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")
        self.mesh = mesh
        self.degree = degree
        nv = mesh.n_vertices
        tri = mesh.triangles
        if degree == 1:
            self.cell_dofs = tri.copy()
            self.coords = mesh.vertices.copy()
            self._edge_id = None
        else:
            loc = np.stack([np.sort(tri[:, list(e)], 1) for e in _EDGES], 1)  # (nt, 3, 2)
            uniq, inv = np.unique(loc.reshape(-1, 2), axis=0, return_inverse=True)
            inv = inv.reshape(-1)
            self._edge_id = {tuple(e): k for k, e in enumerate(uniq)}
            self.cell_dofs = np.hstack([tri, nv + inv.reshape(-1, 3)])
            mid = 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])
            self.coords = np.vstack([mesh.vertices, mid])
        self.n = len(self.coords)
        self.nloc = self.cell_dofs.shape[1]
        p = mesh.vertices[tri]
        self.jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], -1)  # columns are edge vectors
        self.det = np.linalg.det(self.jac)
        if np.any(self.det <= 0):
            raise SingularElement("zero or negative element Jacobian")
        self.jinv = np.linalg.inv(self.jac)
        self.origin = p[:, 0]
        self._locator = None

    def edge_dofs(self, edges):
        """Dofs on each listed boundary edge, ordered (start, end[, mid])."""
        edges = np.asarray(edges, int)
        if self.degree == 1:
            return edges.copy()
        mids = [self.mesh.n_vertices + self._edge_id[tuple(sorted(e))] for e in edges]
        return np.column_stack([edges, mids])

    def boundary_dofs(self, *tags):
        m = self.mesh
        sel = np.isin(m.edge_tags, tags)
        return np.unique(self.edge_dofs(m.boundary_edges[sel]))

    def locator(self):
        if self._locator is None:
            self._locator = Locator(self.mesh)
        return self._locator

    def evaluate(self, coeffs, pts, grad=False):
        """Values (and gradients) of FE functions at arbitrary points.

        ``coeffs`` is ``(n,)`` or ``(ncomp, n)``.
        """
        pts = np.atleast_2d(np.asarray(pts, float))
        cell, bary = self.locator().locate(pts)
        ref = bary[:, 1:]
        phi = np.empty((len(pts), self.nloc))
        dphi = np.empty((len(pts), self.nloc, 2))
        for i, (c, q) in enumerate(zip(cell, ref)):
            v, g = reference_basis(self.degree, q[None])
            phi[i], dphi[i] = v[0], g[0] @ self.jinv[c]
        C = np.asarray(coeffs)[..., self.cell_dofs[cell]]  # (..., npts, nloc)
        val = np.einsum("...pl,pl->...p", C, phi)
        if not grad:
            return val
        return val, np.einsum("...pl,pld->...pd", C, dphi)

    def interpolate(self, fn):
        """Nodal interpolant; ``fn`` maps (n, 2) points to (n,) or (n, ncomp)."""
        v = np.asarray(fn(self.coords), float)
        return v.T.copy() if v.ndim == 2 else v


@dataclass
class ElementData:
    x: np.ndarray  # (nt, nq, 2)
    wdet: np.ndarray  # (nt, nq)
    phi: np.ndarray  # (nq, nloc)
    dphi: np.ndarray  # (nt, nq, nloc, 2)


def element_data(space: Space, order):
    q = triangle_quadrature(order)
    phi, dref = reference_basis(space.degree, q.points)
    x = space.origin[:, None, :] + np.einsum("tdk,qk->tqd", space.jac, q.points)
    dphi = np.einsum("qlk,tkd->tqld", dref, space.jinv)
    return ElementData(x, space.det[:, None] * q.weights[None, :], phi, dphi)


def boundary_data(space: Space, tags, order):
    """Quadrature on tagged boundary edges.

    Returns points (ne, nq, 2), weights*length (ne, nq), basis values on the
    edge (nq, ndof_edge), the edge dofs (ne, ndof_edge) and outward unit
    normals (ne, 2).
    """
    m = space.mesh
    sel = np.isin(m.edge_tags, tags)
    edges = m.boundary_edges[sel]
    s, w = line_quadrature(order)
    a, b = m.vertices[edges[:, 0]], m.vertices[edges[:, 1]]
    x = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    length = np.linalg.norm(b - a, axis=1)
    t = (b - a) / length[:, None]
    # boundary edges are stored with the domain on their left
    normal = np.column_stack([t[:, 1], -t[:, 0]])
    if space.degree == 1:
        phi = np.column_stack([1 - s, s])
    else:
        phi = np.column_stack([(1 - s) * (1 - 2 * s), s * (2 * s - 1), 4 * s * (1 - s)])
    return x, length[:, None] * w[None, :], phi, space.edge_dofs(edges), normal


# ---------------------------------------------------------------------------
# scatter


def scatter_matrix(row_dofs, col_dofs, local, n_rows, n_cols):
    """Sum local blocks into a CSR matrix.

    ``local`` has shape ``(nt, cr, lr, cc, lc)``; global row index of component
    ``a`` and local dof ``i`` is ``a * n_rows + row_dofs[t, i]``.
    """
    local = np.asarray(local)
    if not np.all(np.isfinite(local)):
        raise AssemblyFailure("non-finite entry in local matrices")
    nt, cr, lr, cc, lc = local.shape
    R = (np.arange(cr)[None, :, None] * n_rows + row_dofs[:, None, :])[:, :, :, None, None]
    C = (np.arange(cc)[None, :, None] * n_cols + col_dofs[:, None, :])[:, None, None, :, :]
    R, C = np.broadcast_arrays(R, C)
    M = sp.coo_matrix((local.ravel(), (R.ravel(), C.ravel())), shape=(cr * n_rows, cc * n_cols))
    return M.tocsr()


def scatter_vector(dofs, local, n):
    """``local`` has shape ``(nt, c, l)``; returns a flat vector of length c*n."""
    local = np.asarray(local)
    if not np.all(np.isfinite(local)):
        raise AssemblyFailure("non-finite entry in local vectors")
    nt, c, l = local.shape
    idx = np.arange(c)[None, :, None] * n + dofs[:, None, :]
    return np.bincount(idx.ravel(), local.ravel(), c * n)


def mass_matrix(space: Space, weight=None, order=None):
    ed = element_data(space, order or 2 * space.degree + 2)
    w = ed.wdet if weight is None else ed.wdet * weight(ed.x)
    loc = np.einsum("tq,qi,qj->tij", w, ed.phi, ed.phi)
    return scatter_matrix(space.cell_dofs, space.cell_dofs, loc[:, None, :, None, :], space.n, space.n)


def stiffness_matrix(space: Space, weight=None, order=None):
    ed = element_data(space, order or 2 * space.degree + 2)
    w = ed.wdet if weight is None else ed.wdet * weight(ed.x)
    loc = np.einsum("tq,tqid,tqjd->tij", w, ed.dphi, ed.dphi)
    return scatter_matrix(space.cell_dofs, space.cell_dofs, loc[:, None, :, None, :], space.n, space.n)


# ---------------------------------------------------------------------------
# evaluation at quadrature points and norms


def at_quadrature(space: Space, coeffs, ed: ElementData):
    """Values (..., nt, nq) and gradients (..., nt, nq, 2) of FE functions."""
    C = np.asarray(coeffs)[..., space.cell_dofs]  # (..., nt, nloc)
    val = np.einsum("...tl,ql->...tq", C, ed.phi)
    grad = np.einsum("...tl,tqld->...tqd", C, ed.dphi)
    return val, grad


@dataclass(frozen=True)
class Norms:
    l2: float
    h1_semi: float
    h1: float


def norms(space: Space, coeffs, exact=None, exact_grad=None, order=None):
    """L2, H1-seminorm and H1 norms (plain ``dx``) of a field or its error.

    ``coeffs`` is ``(n,)`` or ``(ncomp, n)``.  When ``exact`` (and optionally
    ``exact_grad``) are given they are subtracted at quadrature points:
    ``exact(x) -> (..., ncomp)``, ``exact_grad(x) -> (..., ncomp, 2)``.
    """
    ed = element_data(space, order or 2 * space.degree + 3)
    c = np.asarray(coeffs, float)
    scalar = c.ndim == 1
    c = np.atleast_2d(c)
    val, grad = at_quadrature(space, c, ed)
    if exact is not None:
        ev = np.asarray(exact(ed.x), float)
        ev = ev[..., None] if scalar and ev.ndim == 2 else ev
        val = val - np.moveaxis(ev, -1, 0)
    if exact_grad is not None:
        eg = np.asarray(exact_grad(ed.x), float)
        eg = eg[..., None, :] if scalar and eg.ndim == 3 else eg
        grad = grad - np.moveaxis(eg, -2, 0)
    l2 = float(np.sqrt(np.sum(ed.wdet * np.sum(val**2, 0))))
    h1s = float(np.sqrt(np.sum(ed.wdet * np.sum(grad**2, (0, -1)))))
    return Norms(l2, h1s, float(np.hypot(l2, h1s)))


# ---------------------------------------------------------------------------
# discrete inf-sup constant


def divergence_matrix(vspace: Space, pspace: Space, order=None):
    """``B[q, (a, v)] = -(d_a v^a, q)`` for a two-component velocity."""
    ed = element_data(vspace, order or 2 * vspace.degree)
    qphi, _ = reference_basis(pspace.degree, triangle_quadrature(order or 2 * vspace.degree).points)
    loc = -np.einsum("tq,qi,tqjd->tidj", ed.wdet, qphi, ed.dphi)  # (nt, lp, 2, lv)
    return scatter_matrix(pspace.cell_dofs, vspace.cell_dofs, loc[:, None], pspace.n, vspace.n)


def lbb_constant(vspace: Space, pspace: Space):
    """Smallest nonzero singular value of the H1-L2 scaled divergence.

    Velocities vanish on the whole boundary, so the pressure constant is the
    one-dimensional kernel that is skipped.
    """
    K = stiffness_matrix(vspace) + mass_matrix(vspace)
    bd = vspace.boundary_dofs("solid", "inlet", "outlet")
    free = np.setdiff1d(np.arange(vspace.n), bd)
    K = K[free][:, free]
    A = sp.block_diag([K, K]).tocsc()
    B = divergence_matrix(vspace, pspace)
    B = B[:, np.concatenate([free, vspace.n + free])]
    M = mass_matrix(pspace).toarray()
    lu = spla.splu(A)
    X = lu.solve(B.T.toarray())
    S = B @ X
    S = 0.5 * (S + S.T)
    ev = np.sort(sla.eigh(S, M, eigvals_only=True))
    return float(np.sqrt(max(ev[1], 0.0)))
