import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from biparallel.errors import DegenerateDomain
from biparallel.fem import (
    Space,
    boundary_data,
    element_data,
    lbb_constant,
    line_quadrature,
    mass_matrix,
    norms,
    stiffness_matrix,
    triangle_quadrature,
)
from biparallel.mesh import Locator, ParameterDomain, read_mesh, refine, triangulate, write_mesh


def test_structured_counts_and_tags():
    m = triangulate(ParameterDomain(), 0.5)
    assert m.n_triangles == 8 and m.n_vertices == 9
    assert set(m.edge_tags) == {"solid", "inlet", "outlet"}
    assert np.isclose(m.areas().sum(), 1.0)
    assert np.all(m.vertices[m.tagged_vertices("inlet"), 0] == 0.0)
    assert np.all(m.vertices[m.tagged_vertices("outlet"), 0] == 1.0)


def test_boundary_normals_point_outward():
    V = Space(triangulate(ParameterDomain(), 0.25), 1)
    x, _, _, _, n = boundary_data(V, ("solid", "inlet", "outlet"), 2)
    mid = x.mean(1)
    centre = np.array([0.5, 1.5])
    assert np.all(np.einsum("ed,ed->e", mid - centre, n) > 0)


def test_refinement_is_nested():
    m = triangulate(ParameterDomain(), 0.25)
    f = refine(m, 3)
    assert f.n_triangles == 9 * m.n_triangles
    coarse = {tuple(np.round(v, 12)) for v in m.vertices}
    fine = {tuple(np.round(v, 12)) for v in f.vertices}
    assert coarse <= fine


def test_curved_arcs():
    d = ParameterDomain(lower=lambda z: 1.0 + 0.1 * z, upper=lambda z: 2.0 - 0.1 * z)
    m = triangulate(d, 0.25)
    assert np.isclose(m.areas().sum(), 0.9)


@pytest.mark.parametrize("dom", [ParameterDomain((0, 1), (2, 1)), ParameterDomain((0, 1), (0, 1)),
                                 ParameterDomain(lower=lambda z: 1.5 + z, upper=lambda z: 1.6 + 0 * z)])
def test_degenerate_domains(dom):
    with pytest.raises(DegenerateDomain):
        triangulate(dom, 0.25)


def test_mesh_roundtrip(tmp_path):
    m = triangulate(ParameterDomain(), 0.25)
    write_mesh(m, tmp_path / "m.txt")
    r = read_mesh(tmp_path / "m.txt")
    assert np.array_equal(r.vertices, m.vertices) and np.array_equal(r.triangles, m.triangles)
    assert list(r.edge_tags) == list(m.edge_tags)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(1, 2)), min_size=1, max_size=20))
def test_locator_barycentric(pts):
    m = triangulate(ParameterDomain(), 0.25)
    cell, bary = Locator(m).locate(np.array(pts))
    rec = np.einsum("pk,pkd->pd", bary, m.vertices[m.triangles[cell]])
    assert np.allclose(rec, pts, atol=1e-12)
    assert np.all(bary > -1e-9)


@given(st.integers(0, 6), st.integers(0, 6))
def test_triangle_quadrature_exact(i, j):
    if i + j > 6:
        return
    q = triangle_quadrature(6)
    val = np.sum(q.weights * q.points[:, 0] ** i * q.points[:, 1] ** j)
    from math import factorial

    exact = factorial(i) * factorial(j) / factorial(i + j + 2)
    assert np.isclose(val, exact, rtol=1e-13, atol=1e-16)


@given(st.integers(0, 7))
def test_line_quadrature_exact(k):
    s, w = line_quadrature(7)
    assert np.isclose(np.sum(w * s**k), 1 / (k + 1))


@pytest.mark.parametrize("deg", [1, 2])
def test_mass_and_stiffness(deg):
    V = Space(triangulate(ParameterDomain(), 0.25), deg)
    M, K = mass_matrix(V), stiffness_matrix(V)
    one = np.ones(V.n)
    assert np.isclose(one @ M @ one, 1.0)
    assert np.allclose(K @ one, 0.0, atol=1e-12)
    z = V.coords[:, 0]
    assert np.isclose(z @ K @ z, 1.0)


@pytest.mark.parametrize("deg", [1, 2])
def test_polynomials_reproduced(deg):
    V = Space(triangulate(ParameterDomain(), 0.25), deg)
    f = (lambda x: 1 + 2 * x[..., 0] - x[..., 1]) if deg == 1 else (lambda x: x[..., 0] * x[..., 1] + x[..., 0] ** 2)
    c = V.interpolate(f)
    assert norms(V, c, f).l2 < 1e-13
    pts = np.array([[0.13, 1.77], [0.91, 1.02]])
    assert np.allclose(V.evaluate(c, pts), f(pts))


@pytest.mark.parametrize("deg,rate", [(1, 2), (2, 3)])
def test_interpolation_rates(deg, rate):
    f = lambda x: np.sin(3 * x[..., 0]) * np.cos(2 * x[..., 1])
    errs = []
    for h in (1 / 4, 1 / 8, 1 / 16):
        V = Space(triangulate(ParameterDomain(), h), deg)
        errs.append(norms(V, V.interpolate(f), f).l2)
    assert np.log2(errs[1] / errs[2]) > rate - 0.2


def test_element_data_weights_sum_to_area():
    V = Space(triangulate(ParameterDomain(), 0.25), 2)
    ed = element_data(V, 4)
    assert np.isclose(ed.wdet.sum(), 1.0)


def test_taylor_hood_inf_sup_bounded_below():
    b = [lbb_constant(Space(triangulate(ParameterDomain(), h), 2), Space(triangulate(ParameterDomain(), h), 1))
         for h in (1 / 4, 1 / 8)]
    assert min(b) > 0.2 and abs(b[0] - b[1]) < 0.1
