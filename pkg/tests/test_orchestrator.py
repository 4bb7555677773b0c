import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from biparallel import orchestrator as O
from biparallel.errors import BadPartition, NonConvergence

import cases


@pytest.mark.parametrize("m", [0, 1, 2.5, -3])
def test_partition_rejects_bad_counts(m):
    with pytest.raises(BadPartition):
        O.partition(m)


@given(st.integers(2, 40))
def test_partition_is_uniform(m):
    xi, tau = O.partition(m)
    assert xi[0] == -1.0 and xi[-1] == 1.0 and np.allclose(np.diff(xi), tau)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.integers(4, 12))
def test_extrapolated_faces_exact_on_quadratics(a, b, c, m):
    xi, _ = O.partition(m)
    p = (a + b * xi + c * xi**2)[:, None]
    lo, hi = O.extrapolated_faces(p, m)
    assert np.allclose([lo[0], hi[0]], [p[0, 0], p[-1, 0]], atol=1e-9)


def test_anderson_solves_linear_contraction():
    rng = np.random.default_rng(0)
    Q = np.linalg.qr(rng.standard_normal((6, 6)))[0]
    M = Q @ np.diag([0.95, 0.9, 0.8, 0.5, 0.3, 0.1]) @ Q.T
    b = rng.standard_normal(6)
    x_star = np.linalg.solve(np.eye(6) - M, b)
    acc, x = O.Anderson(depth=6), np.zeros(6)
    for _ in range(12):
        x = acc.update(x, M @ x + b)
    assert np.linalg.norm(x - x_star) < 1e-8


@pytest.fixture(scope="module")
def small_run():
    return O.run(cases.stack_config(0.25, 3))


def test_small_run_converges(small_run):
    stack, reports, _ = small_run
    assert reports[-1].max_increment < 1e-6 and len(reports) <= 30
    assert np.all(stack.w[0] == 0) and np.all(stack.w[-1] == 0)


def test_threads_do_not_change_result(small_run):
    stack, reports, _ = small_run
    s3, r3, _ = O.run(cases.stack_config(0.25, 3, threads=3))
    assert len(r3) == len(reports)
    assert np.array_equal(s3.w, stack.w) and np.array_equal(s3.p, stack.p)


def test_gauss_seidel_agrees(small_run):
    stack, _, _ = small_run
    gs, _, _ = O.run(cases.stack_config(0.25, 3, ordering="gauss-seidel"))
    assert np.max(np.abs(gs.w - stack.w)) < 1e-4


def test_checkpoint_roundtrip(small_run, tmp_path):
    stack, _, _ = small_run
    O.save_checkpoint(stack, tmp_path / "c.npz", {"h": 0.25})
    back, meta = O.load_checkpoint(tmp_path / "c.npz")
    assert meta == {"h": 0.25} and back.sweep == stack.sweep
    assert np.array_equal(back.w, stack.w) and np.array_equal(back.p, stack.p)


def test_budget_exhaustion_carries_state():
    with pytest.raises(NonConvergence) as info:
        O.run(cases.stack_config(0.25, 3, max_sweeps=1))
    assert info.value.state is not None


def test_unknown_acceleration():
    with pytest.raises(ValueError):
        O.run(cases.stack_config(0.25, 3, acceleration="magic"))
