"""Parameter domain and structured triangulations of it.

The domain is the region ``z0 <= z <= z1``, ``lower(z) <= r <= upper(z)``.
The two radial arcs are solid walls, ``z = z0`` is the inlet and ``z = z1``
the outlet.  Meshes are logically structured so that refinement by an integer
factor gives nested triangulations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateDomain, SingularElement

SOLID, INLET, OUTLET = "solid", "inlet", "outlet"
TAGS = (SOLID, INLET, OUTLET)


def _const(c):
    return lambda z: np.full_like(np.asarray(z, float), float(c))


@dataclass(frozen=True)
class ParameterDomain:
    z_range: tuple = (0.0, 1.0)
    r_range: tuple = (1.0, 2.0)
    lower: Optional[Callable] = None
    upper: Optional[Callable] = None

    def arcs(self):
        lo = self.lower or _const(self.r_range[0])
        hi = self.upper or _const(self.r_range[1])
        return lo, hi

    def validate(self, samples=257):
        r0, r1 = self.r_range
        z0, z1 = self.z_range
        if not (r0 > 0 and r1 > r0 and z1 > z0):
            raise DegenerateDomain(f"bad ranges z={self.z_range} r={self.r_range}")
        zs = np.linspace(z0, z1, samples)
        lo, hi = self.arcs()
        a, b = lo(zs), hi(zs)
        if np.any(a < r0 - 1e-12) or np.any(b > r1 + 1e-12):
            raise DegenerateDomain("boundary arc leaves [r0, r1]")
        if np.any(b - a <= 0):
            raise DegenerateDomain("boundary arcs cross")
        return self


@dataclass
class Triangulation:
    vertices: np.ndarray  # (nv, 2) columns z, r
    triangles: np.ndarray  # (nt, 3), counter-clockwise
    boundary_edges: np.ndarray  # (nb, 2)
    edge_tags: np.ndarray  # (nb,) of str
    h: float
    domain: ParameterDomain = field(default_factory=ParameterDomain)
    shape: tuple = (0, 0)  # cells along z and along the radial arcs

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def areas(self):
        p = self.vertices[self.triangles]
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def max_edge(self):
        p = self.vertices[self.triangles]
        return float(max(np.linalg.norm(p[:, i] - p[:, (i + 1) % 3], axis=1).max() for i in range(3)))

    def tagged_vertices(self, *tags):
        sel = np.isin(self.edge_tags, tags)
        return np.unique(self.boundary_edges[sel])

    def check(self):
        if np.any(self.areas() <= 0):
            raise SingularElement("non-positive triangle area")
        return self


def triangulate(domain: ParameterDomain, h, nz=None, nr=None):
    """Structured triangulation with cells of size about ``h``.

    Every logical cell is cut along the same diagonal, so ``triangulate`` with
    a multiple of the cell counts yields a nested refinement.
    """
    if h <= 0:
        raise DegenerateDomain("mesh size must be positive")
    domain.validate()
    (z0, z1), lo, hi = domain.z_range, *domain.arcs()
    span = float(np.max(hi(np.linspace(z0, z1, 65)) - lo(np.linspace(z0, z1, 65))))
    nz = nz or max(1, int(np.ceil((z1 - z0) / h - 1e-9)))
    nr = nr or max(1, int(np.ceil(span / h - 1e-9)))
    zs = np.linspace(z0, z1, nz + 1)
    s = np.linspace(0.0, 1.0, nr + 1)
    Z, S = np.meshgrid(zs, s, indexing="ij")
    R = lo(Z) + S * (hi(Z) - lo(Z))
    verts = np.column_stack([Z.ravel(), R.ravel()])
    idx = np.arange((nz + 1) * (nr + 1)).reshape(nz + 1, nr + 1)
    v00, v10 = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    v01, v11 = idx[:-1, 1:].ravel(), idx[1:, 1:].ravel()
    tris = np.concatenate([np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])])
    # interleave so each cell's two triangles are adjacent in memory
    tris = tris.reshape(2, -1, 3).transpose(1, 0, 2).reshape(-1, 3)
    edges, tags = [], []
    for j in range(nz):
        edges += [(idx[j, 0], idx[j + 1, 0]), (idx[j + 1, nr], idx[j, nr])]
        tags += [SOLID, SOLID]
    for i in range(nr):
        edges += [(idx[0, i + 1], idx[0, i]), (idx[nz, i], idx[nz, i + 1])]
        tags += [INLET, OUTLET]
    mesh = Triangulation(verts, tris, np.array(edges, int), np.array(tags), float(h), domain, (nz, nr))
    return mesh.check()


def refine(mesh: Triangulation, factor=2):
    """Nested refinement by an integer factor in each logical direction."""
    nz, nr = mesh.shape
    return triangulate(mesh.domain, mesh.h / factor, nz * factor, nr * factor)


class Locator:
    """Point location by nearest-centroid candidates and barycentric tests."""

    def __init__(self, mesh: Triangulation, k=8):
        self.mesh = mesh
        p = mesh.vertices[mesh.triangles]
        self.origin = p[:, 0]
        self.Tinv = np.linalg.inv(np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], -1))
        self.tree = cKDTree(p.mean(1))
        self.k = min(k, mesh.n_triangles)

    def locate(self, pts, tol=1e-10):
        """Triangle index and barycentric coordinates of each point."""
        pts = np.atleast_2d(np.asarray(pts, float))
        _, cand = self.tree.query(pts, self.k)
        cand = cand.reshape(len(pts), -1)
        best = np.full(len(pts), -1)
        bary = np.zeros((len(pts), 3))
        worst = np.full(len(pts), -np.inf)
        for c in cand.T:
            lam = np.einsum("nij,nj->ni", self.Tinv[c], pts - self.origin[c])
            full = np.column_stack([1 - lam.sum(1), lam])
            score = full.min(1)
            better = score > worst
            best[better], bary[better], worst[better] = c[better], full[better], score[better]
        if np.any(worst < -1e-6):
            raise ValueError("point outside the triangulation")
        return best, bary


def write_mesh(mesh: Triangulation, path):
    """Plain-text listing: vertices, triangles, tagged boundary edges."""
    with open(path, "w") as fh:
        fh.write(f"vertices {mesh.n_vertices}\n")
        for z, r in mesh.vertices:
            fh.write(f"{float(z)!r} {float(r)!r}\n")
        fh.write(f"triangles {mesh.n_triangles}\n")
        for t in mesh.triangles:
            fh.write("%d %d %d\n" % tuple(t))
        fh.write(f"edges {len(mesh.boundary_edges)}\n")
        for (a, b), tag in zip(mesh.boundary_edges, mesh.edge_tags):
            fh.write(f"{a} {b} {tag}\n")
        fh.write(f"h {float(mesh.h)!r}\n")


def read_mesh(path):
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    pos = 0

    def block(name):
        nonlocal pos
        assert lines[pos][0] == name, f"expected {name}"
        n = int(lines[pos][1])
        rows = lines[pos + 1 : pos + 1 + n]
        pos += n + 1
        return rows

    verts = np.array([[float(a), float(b)] for a, b in block("vertices")])
    tris = np.array([[int(c) for c in row] for row in block("triangles")], int).reshape(-1, 3)
    erows = block("edges")
    edges = np.array([[int(a), int(b)] for a, b, _ in erows], int).reshape(-1, 2)
    tags = np.array([t for _, _, t in erows])
    h = float(lines[pos][1])
    return Triangulation(verts, tris, edges, tags, h).check()
