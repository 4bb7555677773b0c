import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from biparallel import averaging as A
from biparallel import geometry as geo
from biparallel import layer as L
from biparallel.fem import Space
from biparallel.mesh import ParameterDomain, triangulate

import cases


@given(st.integers(1, 64))
def test_trapezoid_weights_sum_to_one(m):
    w = A.trapezoid_weights(m)
    assert np.isclose(w.sum(), 1.0) and np.all(w > 0)


@given(arrays(float, st.tuples(st.integers(2, 12), st.integers(1, 5)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_fluctuation_has_zero_mean(v):
    assert np.max(np.abs(A.average(A.fluctuation(v)))) <= 1e-9 * max(1.0, np.abs(v).max())


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(2, 20))
def test_average_exact_on_linear_profiles(a, b, m):
    xi = np.linspace(-1, 1, m + 1)
    assert np.isclose(A.average(a + b * xi), a, atol=1e-12)


def test_average_needs_two_surfaces():
    with pytest.raises(ValueError):
        A.average(np.ones((1, 3)))


def test_average_identities_second_order():
    V = Space(triangulate(ParameterDomain(), 1 / 8), 2)
    for m in (4, 8, 16):
        tau = 2 / m
        d = A.verify_average_identities(V, cases.synthetic_stack(V, m))
        assert d["div_identity"] <= 5 * tau**2
        assert d["mean_fluctuation"] < 1e-12 and d["mean_product"] < 1e-12


def test_closure_vanishes_for_uniform_stack():
    mesh = triangulate(ParameterDomain(), 0.25)
    V, Q = Space(mesh, 2), Space(mesh, 1)
    g = L.layer_geometry(geo.log_spiral(0.4, 6), V, Q)
    w = np.random.default_rng(3).standard_normal((3, V.n))
    p = np.ones(Q.n)
    cl = A.stack_closure(g, np.stack([w] * 5), (p, p))
    assert np.max(np.abs(A.closure_load(g, cl, 1.0))) < 1e-10


def test_reduced_solve_converges():
    mesh = triangulate(ParameterDomain(), 0.25)
    V, Q = Space(mesh, 2), Space(mesh, 1)
    g = L.layer_geometry(geo.log_spiral(0.4, 6, omega=0.3), V, Q)
    st_ = A.solve_reduced(g, forcing=lambda x: np.stack([np.ones(x.shape[:-1])] * 3, -1))
    assert st_.converged and np.all(np.isfinite(st_.w))
