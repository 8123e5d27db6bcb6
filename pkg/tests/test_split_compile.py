import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forge.flow import PiecewiseConstantField, flow_map
from forge.nn_core import AffineMap, BoxDomain, eval_net, random_net
from forge.split_compile import (
    BudgetExceeded,
    ErrorBudget,
    SplitStep,
    ToleranceUnreachable,
    assemble,
    check_budget,
    compile_step,
    make_schedule,
    plan_budget,
    schedule_boxes,
    splitting_error,
)


def random_field(seed, dim=2, terms=3, intervals=4):
    rng = np.random.default_rng(seed)
    shape = (intervals, terms, dim)
    return PiecewiseConstantField.uniform(rng.normal(size=shape), rng.normal(size=shape), rng.normal(size=shape[:2]))


def test_schedule_order_and_length():
    f = random_field(0, dim=2, terms=1, intervals=1)
    s = make_schedule(f, 3)
    assert len(s) == 6
    assert [(stp.k, stp.i, stp.j) for stp in s.steps] == [(1, 1, 1), (1, 1, 2), (2, 1, 1), (2, 1, 2), (3, 1, 1), (3, 1, 2)]
    assert s.dt == pytest.approx(1 / 3)
    g = random_field(1, dim=3, terms=2, intervals=2)
    s = make_schedule(g, 4)
    assert len(s) == 4 * 2 * 3
    assert [(stp.k, stp.i, stp.j) for stp in s.steps[:7]] == [
        (1, 1, 1), (1, 1, 2), (1, 1, 3), (1, 2, 1), (1, 2, 2), (1, 2, 3), (2, 1, 1)
    ]


def test_coefficients_frozen_at_left_endpoint():
    f = random_field(2, dim=2, terms=1, intervals=4)
    s = make_schedule(f, 8)
    for stp in s.steps:
        q = (stp.k - 1) // 2
        assert stp.a == f.a[q, stp.i - 1, stp.j - 1]
        np.testing.assert_array_equal(stp.w, f.w[q, stp.i - 1])
        assert stp.b == f.b[q, stp.i - 1]


def test_schedule_rejects_misaligned_n():
    with pytest.raises(ValueError):
        make_schedule(random_field(0, intervals=4), 6)
    with pytest.raises(ValueError):
        make_schedule(random_field(0), 0)


def test_zero_field_schedule_is_identity():
    s = make_schedule(PiecewiseConstantField.zero(3, terms=2, intervals=2), 4)
    assert all(st.is_identity for st in s.steps)
    x = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_array_equal(s(x), x)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_step_changes_one_coordinate(seed, dim):
    rng = np.random.default_rng(seed)
    step = SplitStep(1, 1, int(rng.integers(1, dim + 1)), 0.1, float(rng.normal()), rng.normal(size=dim), float(rng.normal()))
    X = rng.normal(size=(20, dim))
    Y = step(X)
    others = [c for c in range(dim) if c != step.j - 1]
    assert np.array_equal(Y[:, others], X[:, others])
    expect = X[:, step.j - 1] + step.dt * step.a * np.tanh(X @ step.w + step.b)
    np.testing.assert_array_equal(Y[:, step.j - 1], expect)


@pytest.mark.parametrize("seed", range(5))
def test_lie_trotter_first_order(seed):
    f = random_field(seed)
    X = np.random.default_rng(100 + seed).uniform(-1, 1, (200, 2))
    errs = [splitting_error(make_schedule(f, n), f, X, 256) for n in (8, 16, 32, 64)]
    for a, b in zip(errs, errs[1:]):
        assert 1.6 <= a / b <= 2.4


def test_compile_identity_step():
    step = SplitStep(1, 1, 1, 0.1, 0.0, np.array([1.0, 2.0]), 0.5)
    blk = compile_step(step, BoxDomain.cube(2))
    assert blk.error == 0.0
    assert blk.depth == 0
    assert len(blk.net.layers) == 1
    np.testing.assert_array_equal(blk.net.layers[0][0].W, np.eye(2))


EXAMPLE_BOX = BoxDomain.cube(2, -2.0, 2.0)


def _oracle_error(step, net, box, per=201):
    X = box.grid(per)
    return float(np.max(np.abs(eval_net(net, X) - step(X))))


@pytest.mark.parametrize("j", [1, 2])
def test_compile_example_step_default(j):
    a = 1.0
    step = SplitStep(1, 1, j, 0.05, a, np.array([1.0, 1.0]), 0.0)
    blk = compile_step(step, EXAMPLE_BOX, tol=1e-3)
    assert blk.error <= 1e-3
    assert _oracle_error(step, blk.net, EXAMPLE_BOX) <= 1e-3
    assert blk.net.declared_width == 2
    assert max(blk.net.widths, default=2) <= 2


@pytest.mark.slow
def test_compile_example_step_depth_twelve():
    step = SplitStep(1, 1, 1, 0.05, 1.0, np.array([1.0, 1.0]), 0.0)
    blk = compile_step(step, EXAMPLE_BOX, tol=1e-3, max_depth=12)
    assert blk.depth <= 12
    assert blk.error <= 1e-3
    assert _oracle_error(step, blk.net, EXAMPLE_BOX) <= 1e-3


def test_compile_shear_step():
    # w_j = 0: the update does not depend on its own coordinate
    step = SplitStep(1, 1, 1, 0.1, 2.0, np.array([0.0, 1.5]), 0.2)
    box = BoxDomain.cube(2)
    blk = compile_step(step, box, tol=1e-3)
    assert blk.backend in ("shear", "fit")
    assert _oracle_error(step, blk.net, box) <= 1e-3


@pytest.mark.parametrize("wj", [-0.003, 0.02, -0.2])
def test_compile_near_shear_step(wj):
    # dividing by a small w_j would amplify the chain error; the block recovers x_m instead
    step = SplitStep(1, 1, 1, 0.125, 1.66, np.array([wj, -0.89]), -0.51)
    box = BoxDomain(np.array([-1.4, -1.2]), np.array([1.1, 1.2]))
    blk = compile_step(step, box, tol=1e-3)
    assert blk.backend == "shear_chain"
    assert _oracle_error(step, blk.net, box) <= 1e-3
    assert blk.net.declared_width == 2


@pytest.mark.parametrize("seed", range(4))
def test_compile_random_steps_meet_tol(seed):
    rng = np.random.default_rng(seed)
    step = SplitStep(1, 1, int(rng.integers(1, 4)), 1 / 16, float(rng.normal()), rng.normal(size=3), float(rng.normal()))
    box = BoxDomain.cube(3, -1.5, 1.5)
    blk = compile_step(step, box, tol=1e-3, seed=seed)
    assert blk.error <= 1e-3
    assert _oracle_error(step, blk.net, box, per=31) <= 1e-3


def test_compile_infeasible_request():
    step = SplitStep(1, 1, 1, 0.05, 1.0, np.array([1.0, 1.0]), 0.0)
    with pytest.raises(ToleranceUnreachable) as info:
        compile_step(step, EXAMPLE_BOX, tol=1e-12, max_depth=2)
    assert np.isfinite(info.value.best_error)
    assert info.value.best_error > 1e-12
    assert info.value.best.depth <= 2


def test_compile_argument_checks():
    step = SplitStep(1, 1, 1, 0.05, 1.0, np.array([1.0, 1.0]), 0.0)
    with pytest.raises(ValueError):
        compile_step(step, EXAMPLE_BOX, tol=0.0)
    with pytest.raises(ValueError):
        compile_step(step, EXAMPLE_BOX, backend="magic")


def test_compile_is_deterministic():
    step = SplitStep(2, 1, 2, 0.05, -0.7, np.array([0.3, 1.2]), -0.4)
    a = compile_step(step, EXAMPLE_BOX, seed=5)
    b = compile_step(step, EXAMPLE_BOX, seed=5)
    assert a.net == b.net and a.error == b.error


def test_plan_budget_examples():
    b = plan_budget(0.3)
    assert (b.lift, b.flow, b.discretization) == pytest.approx((0.1, 0.1, 0.1), rel=1e-12)
    b = plan_budget(0.09)
    assert (b.lift, b.flow, b.discretization) == pytest.approx((0.03, 0.03, 0.03), rel=1e-12)
    b = plan_budget(0.2, (0.5, 0.25, 0.25))
    assert (b.lift, b.flow, b.discretization) == pytest.approx((0.1, 0.05, 0.05), rel=1e-12)
    with pytest.raises(ValueError):
        plan_budget(0.0)
    with pytest.raises(ValueError):
        ErrorBudget(0.1, 0.1, 0.1, 0.1)


@given(st.floats(1e-6, 1e3), st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 1)))
def test_plan_budget_sums_to_total(eps, props):
    b = plan_budget(eps, props)
    assert b.lift + b.flow + b.discretization <= eps * (1 + 1e-12)
    assert b.lift + b.flow + b.discretization == pytest.approx(eps, rel=1e-12)


def test_check_budget():
    with pytest.raises(BudgetExceeded) as info:
        check_budget({"lift": 0.1, "flow": 0.15, "discretization": 0.1}, plan_budget(0.3))
    assert info.value.end_to_end == pytest.approx(0.35)
    assert info.value.stage_errors["flow"] == 0.15
    check_budget({"lift": 0.1, "flow": 0.1, "discretization": 0.05}, plan_budget(0.3))


def test_assemble_identity_lift_empty_schedule():
    d = 2
    alpha = AffineMap(np.vstack([np.eye(d), np.ones((1, d))]), np.zeros(d + 1))
    beta = AffineMap(np.hstack([np.eye(d), -2.0 * np.ones((d, 1))]), np.zeros(d))
    net = assemble(alpha, [], beta, d + 1, 0.99)
    assert net.depth == 0
    assert len(net.layers) == 1
    X = np.random.default_rng(0).normal(size=(20, d))
    np.testing.assert_allclose(eval_net(net, X), beta(alpha(X)), rtol=1e-14)


def test_assemble_absorption_preserves_semantics():
    rng = np.random.default_rng(9)
    n = 3
    blocks = [random_net(rng, n, n, n, int(rng.integers(0, 4)), alpha=0.7) for _ in range(6)]
    alpha = AffineMap(rng.normal(size=(n, 2)), rng.normal(size=n))
    beta = AffineMap(rng.normal(size=(2, n)), rng.normal(size=2))
    net = assemble(alpha, blocks, beta, n, 0.7)
    assert net.depth == sum(b.depth for b in blocks)
    X = rng.normal(size=(1000, 2))
    h = alpha(X)
    for b in blocks:
        h = eval_net(b, h)
    ref = beta(h)
    np.testing.assert_allclose(eval_net(net, X), ref, rtol=1e-12, atol=1e-12 * np.max(np.abs(ref)))


def test_schedule_boxes_cover_trajectory():
    f = random_field(4)
    s = make_schedule(f, 4)
    X = np.random.default_rng(0).uniform(-1, 1, (100, 2))
    boxes = schedule_boxes(s, X)
    assert len(boxes) == len(s)
    for step, box in zip(s.steps, boxes):
        assert np.all(box.contains(X))
        X = step(X)


def test_compiled_schedule_tracks_flow():
    f = random_field(5, terms=2, intervals=2)
    s = make_schedule(f, 8)
    X = np.random.default_rng(1).uniform(-1, 1, (200, 2))
    boxes = schedule_boxes(s, X)
    blocks = [compile_step(st, bx, tol=1e-3, seed=k).net for k, (st, bx) in enumerate(zip(s.steps, boxes))]
    ident = AffineMap.identity(2)
    net = assemble(ident, blocks, ident, 2, 0.99)
    comp = np.max(np.abs(eval_net(net, X) - s(X)))
    assert comp <= 1e-3 * len(s)
    ref = flow_map(f, X, 64)
    assert np.max(np.abs(eval_net(net, X) - ref)) <= comp + splitting_error(s, f, X) + 1e-12
    assert net.declared_width == 2
