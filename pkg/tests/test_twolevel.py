import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from biparallel import geometry as geo
from biparallel import manufactured as mf
from biparallel import twolevel as T
from biparallel.errors import SingularLinearization
from biparallel.fem import Space

SHAPE = geo.log_spiral(c=0.5, n_blades=4, omega=0.5)
CASE = T.manufactured_case(mf.smooth_field(0.5), SHAPE, pressure_degree=1)


@given(st.sampled_from([1 / 2, 1 / 4, 1 / 8, 1 / 16]), st.integers(1, 3), st.integers(1, 3))
def test_balanced_fine_size_not_coarser(h, k, m):
    hf = T.balanced_fine_size(h, k, m)
    if m <= 2 * k:
        assert hf <= h * (1 + 1e-12)
    if h / hf <= 8:  # keep the meshes small
        plan = T.make_plan(h, k, m)
        assert plan.h_fine <= h and plan.factor >= 1


@pytest.mark.parametrize("h,factor", [(1 / 4, 2), (1 / 8, 3)])
def test_plan_refinement_factor(h, factor):
    plan = T.make_plan(h)
    assert plan.factor == factor and plan.h_fine <= T.balanced_fine_size(h) + 1e-12


def test_plan_rejects_fine_size_above_coarse():
    with pytest.raises(ValueError):
        T.make_plan(0.25, h_fine=0.5)


def test_transfer_exact_on_nested_meshes():
    plan = T.make_plan(0.25)
    C, F = Space(plan.coarse_mesh, 1), Space(plan.fine_mesh, 1)
    f = lambda x: 1 + 2 * x[..., 0] - x[..., 1]
    assert np.allclose(plan.transfer(C, F, C.interpolate(f))[0], F.interpolate(f), atol=1e-12)


def test_newton_step_is_idempotent_on_same_mesh():
    plan = T.make_plan(0.25, h_fine=0.25)
    co = T.coarse_solve(CASE, plan, gate=False)
    fi = T.fine_one_step_newton(co, plan, CASE, check=False)
    assert np.max(np.abs(fi.w - co.state.w)) < 1e-7


def test_two_level_beats_coarse_and_tracks_direct():
    row = T.run_level(CASE, 0.25)
    assert row.two_level_h1 < 0.6 * row.coarse_h1
    assert row.two_level_h1 <= 1.05 * row.direct_h1


def test_singular_linearization_gate():
    plan = T.make_plan(0.25)
    co = T.coarse_solve(CASE, plan, gate=False)
    with pytest.raises(SingularLinearization):
        T.fine_one_step_newton(co, plan, CASE, alpha_floor=1e9)


def test_frechet_discrepancy_is_first_order():
    pb = CASE.problem(T.make_plan(0.25).coarse_mesh, 1)
    w = np.random.default_rng(1).standard_normal((3, pb.geom.vspace.n))
    e = T.frechet_check(pb, w, np.zeros(pb.geom.pspace.n))
    assert e[1] < 0.2 * e[0] and e[2] < 0.2 * e[1]


def test_fit_slope_ignores_saturated_levels():
    assert np.isclose(T.fit_slope([0.5, 0.25, 0.125], [4.0, 1.0, 0.25]), 2.0)
    assert np.isnan(T.fit_slope([0.5, 0.25], [0.0, 0.0]))
