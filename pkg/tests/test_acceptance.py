"""Acceptance criteria 1-11, one test each, at the stated tolerances.

Each test records a one-line verdict in ``RESULTS``; the conftest hook prints
them after the run.
"""

import time

import numpy as np
import pytest

from biparallel import averaging as A
from biparallel import geometry as geo
from biparallel import manufactured as mf
from biparallel import orchestrator as O
from biparallel import pressure as PR
from biparallel import twolevel as T
from biparallel.checks import identity_residuals, oracle_errors, random_points, random_shape
from biparallel.fem import Space, norms
from biparallel.mesh import ParameterDomain, triangulate
from biparallel.oracle import fd_oracle

import cases

RESULTS = {}
PRESETS = ("flat", "linear-wrap", "log-spiral")


def record(n, ok, detail):
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


def slope(hs, errs):
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0])


def test_c01_oracle_equivalence():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(100):
        shape = random_shape(rng, PRESETS[i % 3])
        x, xi = random_points(rng, 1)
        worst = max(worst, max(oracle_errors(shape, x[0], xi[0]).values()))
    secs = time.perf_counter() - t0
    record(1, worst <= 1e-6 and secs < 10, f"max rel err {worst:.2e} (<= 1e-6), {secs:.1f} s (< 10 s)")


def test_c02_exact_identities():
    rng = np.random.default_rng(202)
    worst = {}
    for kind in PRESETS:
        shape = random_shape(rng, kind)
        x, xi = random_points(rng, 1000)
        for k, v in identity_residuals(shape, x, xi, rng).items():
            worst[k] = max(worst.get(k, 0.0), v)
    top = max(worst.values())
    record(2, top <= 1e-12, f"max residual {top:.2e} over 1000 samples per preset (<= 1e-12)")


def _cubic(rng):
    """Random cubic in (z, r, xi) with exact first and second derivatives."""
    exps = np.array([(a, b, c) for a in range(4) for b in range(4) for c in range(4) if a + b + c <= 3])
    coef = rng.standard_normal(len(exps))

    def mono(v, e):
        # monomials, zero where an exponent went negative
        return np.where((e >= 0).all(1), np.prod(v ** np.maximum(e, 0), 1), 0.0)

    def derivs(x, xi):
        v = np.array([x[0], x[1], xi])
        eye = np.eye(3, dtype=int)
        d1 = np.array([coef @ (exps[:, i] * mono(v, exps - eye[i])) for i in range(3)])
        d2 = np.array([[coef @ (exps[:, i] * (exps[:, j] - eye[i, j]) * mono(v, exps - eye[i] - eye[j]))
                        for j in range(3)] for i in range(3)])
        return d1, d2

    return derivs


def test_c03_laplacian_split():
    rng = np.random.default_rng(303)
    worst = 0.0
    for i in range(50):
        shape = random_shape(rng, PRESETS[i % 3])
        x, xi = random_points(rng, 1)
        dp, d2p = _cubic(rng)(x[0], xi[0])
        o = fd_oracle(shape, x[0], xi[0])
        ref = np.einsum("ij,ij", o.g_con, d2p) - np.einsum("ij,kij,k", o.g_con, o.christoffel, dp)
        split = (PR.membrane_part(shape, x, dp[None], d2p[None])
                 + PR.bending_part(shape, x, dp[None], d2p[None]))[0]
        worst = max(worst, abs(split - ref) / max(abs(ref), 1.0))
    record(3, worst <= 1e-6, f"max rel err {worst:.2e} at 50 points (<= 1e-6)")


def test_c04_gauss_codazzi_order():
    shapes = [geo.linear_wrap(0.5, 4), geo.shape_from_expression("0.3*z*z*r + 0.2*log(r)", 4)]
    orders = []
    for s in shapes:
        res = [geo.gauss_codazzi_residual(*geo.forms_on_grid(s, (0, 1), (1, 2), n)) for n in (41, 81, 161)]
        orders += [np.log2(res[1][k] / res[2][k]) for k in ("gauss", "codazzi")]
    low = min(orders)
    record(4, low >= 1.8, f"min observed order {low:.3f} over gauss/codazzi, 2 shapes (>= 1.8)")


def test_c05_averaging_identity():
    V = Space(triangulate(ParameterDomain(), 1 / 8), 2)
    ratios = []
    for m in (8, 16, 32):
        tau = 2 / m
        d = A.verify_average_identities(V, cases.synthetic_stack(V, m))
        ratios.append(d["div_identity"] / tau**2)
    ok = max(ratios) <= 5
    record(5, ok, "residual/tau^2 = " + ", ".join(f"{r:.2f}" for r in ratios) + " for tau=1/4,1/8,1/16 (<= 5)")


def test_c06_penalty_slope():
    etas = (1e-2, 1e-3, 1e-4, 1e-5)
    V, Q, sols = cases.penalty_solutions(geo.log_spiral(0.5, 4, 0.5), etas)
    ref = sols[etas[-1]]
    errs = [norms(V, sols[e].w - ref.w).h1 + norms(Q, sols[e].p - ref.p).l2 for e in etas[:-1]]
    s = slope(etas[:-1], errs)
    record(6, s >= 0.9, f"slope {s:.3f} in eta (>= 0.9)")


def test_c07_layer_convergence():
    hs = (1 / 8, 1 / 16, 1 / 32)
    parts = []
    ok = True
    for name, shape in (("flat", geo.flat(4, 0.5)), ("log-spiral", geo.log_spiral(0.5, 4, 0.5))):
        t0 = time.perf_counter()
        e = np.array([cases.layer_errors(shape, h) for h in hs])
        secs = time.perf_counter() - t0
        sv, sp_ = slope(hs, e[:, 0]), slope(hs, e[:, 1])
        ok &= sv >= 1.8 and sp_ >= 1.8 and secs < 300
        parts.append(f"{name}: H1 {sv:.2f}, L2p {sp_:.2f}, {secs:.0f} s")
    record(7, ok, "; ".join(parts) + " (>= 1.8, < 300 s)")


def test_c08_pressure_correction():
    shape = geo.log_spiral(0.5, 4)
    hs = (1 / 8, 1 / 16, 1 / 32)
    si = slope(hs, [cases.interior_pressure_error(shape, h) for h in hs])
    taus = (1 / 4, 1 / 8, 1 / 16)
    sb = min(slope(taus, [cases.blade_pressure_error(shape, 1 / 32, t, side) for t in taus]) for side in (-1, 1))
    record(8, si >= 1.8 and sb >= 0.8, f"interior L2 slope {si:.2f} (>= 1.8); blade slope in tau {sb:.2f} (>= 0.8)")


def test_c09_two_level():
    case = T.manufactured_case(mf.smooth_field(0.5), geo.log_spiral(0.5, 4, 0.5), pressure_degree=1)
    ok, parts = True, []
    for h in (1 / 4, 1 / 8):
        row = T.run_level(case, h)
        ratio = row.two_level_h1 / row.direct_h1
        # two-level: one linear solve on the fine mesh; direct: full nonlinear iteration there
        frac = 1 / row.direct_iterations
        ok &= ratio <= 2 and frac <= 0.5
        parts.append(f"h=1/{round(1 / h)} h*=1/{round(1 / row.h_fine)}: err ratio {ratio:.3f}, "
                     f"fine iterations 1 vs {row.direct_iterations} (coarse {row.coarse_iterations})")
    record(9, ok, "; ".join(parts) + " (ratio <= 2, <= 50%)")


XI_COMMON = (-0.5, 0.0, 0.5)


@pytest.fixture(scope="module")
def stacks():
    out = {}
    for h, m in ((1 / 8, 4), (1 / 16, 8)):
        t0 = time.perf_counter()
        stack, reports, ctx = O.run(cases.stack_config(h, m))
        out[m] = (stack, reports, ctx, time.perf_counter() - t0)
    return out


def test_c10_biparallel_end_to_end(stacks):
    (s4, r4, c4, _), (s8, r8, c8, t8) = stacks[4], stacks[8]
    e4, e8 = cases.stack_errors_at(s4, c4, XI_COMMON), cases.stack_errors_at(s8, c8, XI_COMMON)
    ov, op = np.log2(e4[0] / e8[0]), np.log2(e4[1] / e8[1])
    s8t, r8t, _ = O.run(cases.stack_config(1 / 16, 8, threads=8))
    same = (len(r8t) == len(r8) and np.array_equal(s8t.w, s8.w) and np.array_equal(s8t.p, s8.p)
            and np.array_equal(s8t.p_corr, s8.p_corr))
    ok = len(r8) <= 30 and len(r4) <= 30 and min(ov, op) >= 1.8 and same
    record(10, ok, f"sweeps {len(r4)} (m=4) / {len(r8)} (m=8) (<= 30); order H1 {ov:.2f}, L2p {op:.2f} "
                   f"at xi=-0.5,0,0.5 (>= 1.8); threads 1 vs 8 bit-identical: {same}; m=8 run {t8:.0f} s")


def test_c11_diagnostics(stacks):
    stack, _, ctx, _ = stacks[4]
    order = ctx.geom.order
    I1, J1 = O.diagnostics(stack, ctx, order)
    I2, J2 = O.diagnostics(stack, ctx, 2 * order)
    rel = abs(I2 - I1) / abs(I2)
    rng = np.random.default_rng(11)
    Js = [J1, J2, O.diagnostics(stacks[8][0], stacks[8][2])[1]]
    for _ in range(5):
        st = stack.copy()
        st.w[1:-1] = rng.standard_normal(st.w[1:-1].shape)
        Js.append(O.diagnostics(st, ctx)[1])
    ok = min(Js) >= 0 and rel < 0.01
    record(11, ok, f"min J {min(Js):.3e} (>= 0); I {I1:.6e} vs {I2:.6e} under order doubling, "
                   f"change {100 * rel:.3f}% (< 1%)")
