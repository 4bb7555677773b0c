import numpy as np
import pytest

from biparallel import geometry as geo
from biparallel import pressure as PR
from biparallel.errors import InsufficientLayers
from biparallel.fem import Space
from biparallel.mesh import ParameterDomain, triangulate

import cases

SHAPE = geo.log_spiral(0.5, 4)


def pgeom(h=0.25):
    return PR.pressure_geometry(SHAPE, Space(triangulate(ParameterDomain(), h), 1))


@pytest.mark.parametrize("expr", ["0.4*log(r) + 0.3*z*z", "sin(z)*r/3"])
def test_beltrami_split_matches_divergence_form(expr, rng):
    shape = geo.shape_from_expression(expr, 5)
    pts = np.column_stack([rng.uniform(0, 1, 40), rng.uniform(1, 2, 40)])
    err = PR.beltrami_split_check(shape, "sin(z)*r**2*(1 + xi**3) + cos(r*xi)", pts, [-0.7, 0.0, 0.4])
    assert err < 1e-10


def test_interior_pressure_second_order_in_h():
    errs = [cases.interior_pressure_error(SHAPE, h) for h in (1 / 8, 1 / 16, 1 / 32)]
    rates = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(rates > 1.8)


@pytest.mark.parametrize("side", [-1, 1])
def test_blade_pressure_converges_in_tau(side):
    errs = [cases.blade_pressure_error(SHAPE, 1 / 32, t, side) for t in (1 / 4, 1 / 8)]
    assert errs[1] < 0.5 * errs[0]


def test_blade_pressure_needs_two_interior_surfaces():
    g = pgeom()
    one = [np.zeros(Space(triangulate(ParameterDomain(), 0.25), 1).n)]
    with pytest.raises(InsufficientLayers):
        PR.solve_blade_pressure(-1, g, 0.5, one, one[0])


def test_bad_side_kind_and_tau():
    Q = Space(triangulate(ParameterDomain(), 0.25), 1)
    g = PR.pressure_geometry(SHAPE, Q)
    z = np.zeros(Q.n)
    with pytest.raises(ValueError):
        PR.solve_blade_pressure(0, g, 0.5, [z, z], z)
    with pytest.raises(ValueError):
        PR.reaction_coefficient(g, 0.5, "bogus")
    with pytest.raises(ValueError):
        PR.PressureProblem(g, 0.0, None, z, z)


def test_reaction_coefficient_positive():
    g = pgeom()
    assert np.all(PR.reaction_coefficient(g, 0.25) > 0)
