import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from biparallel import geometry as geo
from biparallel import layer as L
from biparallel import manufactured as mf
from biparallel.errors import NonConvergence
from biparallel.fem import Space, norms
from biparallel.mesh import ParameterDomain, triangulate
from biparallel.twolevel import frechet_check, manufactured_case

SHAPE = geo.log_spiral(0.5, 4, omega=0.5)


def geom(h=0.25, deg=2, shape=SHAPE):
    m = triangulate(ParameterDomain(), h)
    return L.layer_geometry(shape, Space(m, deg), Space(m, 1))


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(0.05, 0.5))
def test_central_quotients_exact_on_quadratics(a, b, c, tau):
    f = lambda s: a + b * s + c * s * s
    d1, d2, d2t = L.difference_ops(f(-tau), f(0.0), f(tau), tau)
    assert np.isclose(d1, b, atol=1e-9) and np.isclose(d2, 2 * c, atol=1e-8)
    assert np.isclose(d2t, (f(tau) + f(-tau)) / tau**2)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.05, 0.5), st.sampled_from([-1, 1]))
def test_blade_quotient_exact_on_linears(a, b, tau, side):
    f = lambda s: a + b * s
    d, _, _ = L.blade_difference_ops(side, f(side), f(side - side * tau), f(-side), tau)
    assert np.isclose(d, b, atol=1e-9)


def test_zero_data_gives_zero_solution():
    g = geom()
    pb = L.LayerProblem(g, nu=1.0, tau=0.5, eta=1e-6, centrifugal=False)
    st_ = L.solve_layer(pb)
    assert np.all(np.abs(st_.w) < 1e-13) and np.all(np.abs(st_.p) < 1e-13)


def test_invalid_parameters_rejected():
    with pytest.raises(ValueError):
        L.LayerProblem(geom(), tau=0.0)


def _case_problem(h, deg=2):
    case = manufactured_case(mf.smooth_field(0.5), SHAPE, pressure_degree=1)
    return case, case.problem(triangulate(ParameterDomain(), h), deg)


def test_manufactured_solution_converges():
    errs = []
    for h in (1 / 4, 1 / 8):
        case, pb = _case_problem(h)
        s = L.solve_layer(pb)
        assert s.converged
        errs.append(case.errors(pb, s.w, s.p))
    assert errs[0][0] / errs[1][0] > 3.0
    assert errs[0][1] / errs[1][1] > 3.0


def test_newton_matches_picard():
    _, pb = _case_problem(0.25)
    a = L.solve_layer(pb, L.IterationPolicy("picard"))
    b = L.solve_layer(pb, L.IterationPolicy("newton", newton_switch=1e-1))
    assert np.allclose(a.w, b.w, atol=1e-9)
    assert any(h["newton"] for h in b.history)
    assert b.iterations <= a.iterations


def test_newton_matrix_is_frechet_derivative():
    _, pb = _case_problem(0.25)
    rng = np.random.default_rng(2)
    w = rng.standard_normal((3, pb.geom.vspace.n))
    errs = frechet_check(pb, w, np.zeros(pb.geom.pspace.n), steps=(1e-2, 1e-3))
    assert errs[1] < 0.2 * errs[0]


def test_nonconvergence_carries_state():
    _, pb = _case_problem(0.25)
    with pytest.raises(NonConvergence) as exc:
        L.solve_layer(pb, L.IterationPolicy(max_iterations=1, tol=1e-14))
    assert exc.value.state is not None and exc.value.state.w.shape == (3, pb.geom.vspace.n)
    assert len(exc.value.history) == 1


def test_penalty_constraint_residual():
    _, pb = _case_problem(0.25)
    s = L.solve_layer(pb)
    assert L.pressure_residual(pb, s) < 1e-10


def test_trilinear_vanishes_for_gradient_of_square():
    # axial advection 1/r of a swirl component: the integrand is d_z of (u^3)^2 / 2
    g = geom(0.125, 2, geo.flat(4))
    pb = L.LayerProblem(g, transverse=False)
    V = g.vspace
    z, r = V.coords[:, 0], V.coords[:, 1]
    w = np.zeros((3, V.n))
    w[0] = 1.0 / r
    u = np.zeros((3, V.n))
    u[2] = np.sin(np.pi * z) * (r - 1) * (2 - r)
    assert abs(L.trilinear(pb, w, u, u)) < 1e-10
    v = np.zeros_like(u)
    v[2] = z
    assert abs(L.trilinear(pb, w, u, v)) > 1e-4


def test_smallness_diagnostic_reports_constants():
    _, pb = _case_problem(0.25)
    rep = L.smallness_diagnostic(pb, samples=4)
    assert rep.dual_norm > 0 and rep.M > 0 and rep.lam > 0
    assert rep.satisfied == (rep.margin >= 0)


def test_reduced_problem_has_no_transverse_terms():
    g = geom()
    pb = L.LayerProblem(g, transverse=False, forcing=lambda x: np.ones(x.shape[:-1] + (3,)))
    src = L.coupling_source(pb)
    assert np.all(src["load"] == 0) and np.all(src["d_tau"] == 0)
