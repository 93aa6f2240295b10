import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridpulse.cfnn import CfnnNet, CfnnTopology
from gridpulse.trainer import (LineSearchResult, SweepRow, TrainConfig, TrainingDivergence,
                               cg_direction, interior_maximum, line_search, make_evaluator,
                               minimize_cg, pr_beta, search_mask, sweep, train,
                               validation_split)


# -- direction update ----------------------------------------------------------------------

def test_pr_beta_examples():
    assert pr_beta([0.0, 2.0], [1.0, 0.0]) == pytest.approx(4.0)
    assert pr_beta([0.5, 0.0], [1.0, 0.0], clamp=False) == pytest.approx(-0.25)
    assert pr_beta([0.5, 0.0], [1.0, 0.0]) == 0.0
    with pytest.raises(ZeroDivisionError):
        pr_beta([1.0, 0.0], [0.0, 0.0])


def test_cg_direction_examples():
    d, restarted = cg_direction([1.0, 0.0], [0.0, 1.0], 2.0)
    np.testing.assert_allclose(d, [-1.0, 2.0])
    assert not restarted
    d, restarted = cg_direction([1.0, 0.0], [5.0, 0.0], 1.0)  # uphill: reset
    np.testing.assert_allclose(d, [-1.0, 0.0])
    assert restarted
    assert cg_direction([1.0, 2.0], None, 0.0)[1]


# -- line search -----------------------------------------------------------------------------

def test_line_search_exact_on_parabola():
    fg = lambda x: (float(x @ x), 2 * x)
    x = np.array([1.0])
    d = np.array([-2.0])
    res = line_search(fg, x, d, 1.0, -4.0, TrainConfig(), step0=1.0)
    assert res.step == pytest.approx(0.5, rel=1e-12)
    assert res.f == pytest.approx(0.0, abs=1e-20)
    assert not res.failed


@given(st.floats(0.1, 5.0), st.floats(1e-3, 50.0))
def test_line_search_meets_sufficient_decrease_on_quartic(x0, step0):
    fg = lambda x: (float(np.sum(x**4)), 4 * x**3)
    x = np.array([x0])
    f0, g0 = fg(x)
    d = -g0
    slope = float(g0 @ d)
    res = line_search(fg, x, d, f0, slope, TrainConfig(), step0=step0)
    assert not res.failed
    assert res.f <= f0 + 1e-4 * res.step * slope


def test_line_search_rejects_uphill():
    fg = lambda x: (float(x @ x), 2 * x)
    with pytest.raises(ValueError, match="descent"):
        line_search(fg, np.array([1.0]), np.array([1.0]), 1.0, 2.0)


def test_line_search_never_returns_a_worse_point():
    # a cliff right after the origin: every trial is worse or non-finite
    fg = lambda x: ((float(x[0]) if x[0] <= 0 else np.inf), np.array([1.0]))
    res = line_search(fg, np.array([0.0]), np.array([-1.0]), 0.0, -1.0, step0=1.0)
    assert isinstance(res, LineSearchResult)
    assert res.f <= 0.0


# -- CG on quadratics -----------------------------------------------------------------------------

def quadratic(n=50, seed=0):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    A = Q @ np.diag(np.linspace(1.0, 10.0, n)) @ Q.T
    b = rng.normal(size=n)
    return A, b, lambda x: (0.5 * x @ A @ x - b @ x + 1.0, A @ x - b)


def exact_search(A):
    def search(fg, x, d, f, slope, step0):
        a = -slope / float(d @ A @ d)
        f_new, g_new = fg(x + a * d)
        return LineSearchResult(a, f_new, g_new, 1, False)
    return search


def test_cg_terminates_on_quadratic_with_exact_steps():
    A, b, fg = quadratic()
    cfg = TrainConfig(max_iter=60, grad_tol=1e-8, pr_clamp=False)
    x, rep = minimize_cg(fg, np.zeros(50), cfg, line_search_fn=exact_search(A))
    assert rep.stop_reason == "grad_tol" and rep.iterations <= 60
    np.testing.assert_allclose(x, np.linalg.solve(A, b), atol=1e-7)


def test_default_search_also_converges_on_quadratic():
    A, b, fg = quadratic(seed=3)
    x, rep = minimize_cg(fg, np.zeros(50), TrainConfig(max_iter=200, grad_tol=1e-6))
    # function-value tests cannot resolve decreases below ~eps * |f| = 1e-15 (g ~ 3e-8)
    assert rep.stop_reason == "grad_tol"
    np.testing.assert_allclose(x, np.linalg.solve(A, b), atol=1e-6)
    assert np.all(np.diff(rep.losses) <= 1e-12)


def test_restart_every_step_is_steepest_descent():
    A, b, fg = quadratic(n=10, seed=1)
    cfg = TrainConfig(max_iter=5, restart_period=1)
    _, rep = minimize_cg(fg, np.zeros(10), cfg, line_search_fn=exact_search(A))
    assert rep.restarts == 5
    assert all(rec[3] == 0.0 and rec[5] for rec in rep.records)
    x = np.zeros(10)
    for rec in rep.records:
        g = A @ x - b
        x = x - rec[4] * g
    x_cg, _ = minimize_cg(fg, np.zeros(10), cfg, line_search_fn=exact_search(A))
    np.testing.assert_allclose(x_cg, x, atol=1e-12)


def test_rosenbrock():
    def fg(v):
        x, y = v
        return (1 - x) ** 2 + 100 * (y - x * x) ** 2, np.array(
            [-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])
    x, rep = minimize_cg(fg, np.array([-1.2, 1.0]), TrainConfig(max_iter=2000, grad_tol=1e-7))
    np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-5)


def test_non_finite_start_raises():
    with pytest.raises(TrainingDivergence):
        minimize_cg(lambda x: (np.nan, x), np.zeros(2))


def test_config_validation():
    for kw in [dict(grad_tol=0), dict(restart_period=0), dict(c1=1.5), dict(max_iter=-1),
               dict(weight_decay=-1.0)]:
        with pytest.raises(ValueError):
            TrainConfig(**kw)
    assert TrainConfig().period(50) == 50 and TrainConfig().period(5000) == 200


# -- training a network ----------------------------------------------------------------------------

def toy_problem(seed=0, n=40):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 8))
    y = (X[:, 0] + X[:, 5] > 0).astype(int)
    return X, y


def test_train_is_deterministic_and_logs():
    X, y = toy_problem()
    top = CfnnTopology(2, 4, hidden=(2, 2, 2))
    net = CfnnNet(top)
    cfg = TrainConfig(max_iter=30)
    a, ra = train(net, X, y, cfg)
    b, rb = train(net, X, y, cfg)
    np.testing.assert_array_equal(a, b)
    assert ra.log_lines() == rb.log_lines()
    assert ra.log_lines()[0] == "k loss grad_norm beta step restart"
    assert len(ra.log_lines()) == ra.iterations + 1
    assert ra.final_loss < ra.losses[0]


def test_weight_decay_shrinks_parameters():
    X, y = toy_problem()
    net = CfnnNet(CfnnTopology(2, 4, hidden=(2, 2)))
    plain, _ = train(net, X, y, TrainConfig(max_iter=100))
    decayed, rep = train(net, X, y, TrainConfig(max_iter=100, weight_decay=0.1))
    assert np.linalg.norm(decayed) < np.linalg.norm(plain)
    loss, _ = net.loss_grad(decayed, X, y)
    assert rep.final_loss == pytest.approx(loss + 0.05 * decayed @ decayed)


# -- validation split and mask search ---------------------------------------------------------------

def test_validation_split():
    tr, val = validation_split(10, 0.2, seed=4)
    assert len(val) == 2 and len(tr) == 8
    assert sorted(np.concatenate([tr, val]).tolist()) == list(range(10))
    np.testing.assert_array_equal(validation_split(10, 0.2, seed=4)[1], val)
    with pytest.raises(ValueError):
        validation_split(10, 1.0)


def brute_force(top, evaluate, budget):
    best = None
    for r in range(top.n_blocks + 1):
        for blocks in itertools.combinations(range(top.n_blocks), r):
            conn = sum(top.block_size(b) for b in blocks)
            if conn > budget:
                continue
            acc, fpr = evaluate(blocks)
            key = (acc, -fpr, -conn, tuple(-b for b in blocks))
            if best is None or key > best[0]:
                best = (key, blocks)
    return best[1]


def knapsack(values, penalty=()):
    """Score that grows with every block switched on, so relaxations bound their subtrees."""
    def evaluate(blocks):
        acc = sum(values[b] for b in blocks)
        fpr = sum(penalty[b] for b in blocks) if penalty else 0.0
        return acc, fpr
    return evaluate


@given(st.integers(2, 4).flatmap(lambda n: st.tuples(
    st.lists(st.integers(1, 4), min_size=n, max_size=n),
    st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n),
    st.integers(0, 40))))
def test_branch_and_bound_matches_brute_force(case):
    widths, values, budget = case
    top = CfnnTopology(2, 3, hidden=(1, *widths))
    evaluate = knapsack(values)
    expected = brute_force(top, evaluate, budget)
    bb = search_mask(top, evaluate, budget, exhaustive_limit=0)
    ex = search_mask(top, evaluate, budget)
    assert not bb.exhaustive and ex.exhaustive
    assert bb.blocks == ex.blocks == expected
    assert bb.mask.sum() == sum(top.block_size(b) for b in expected)


def test_margin_keeps_more_nodes():
    top = CfnnTopology(2, 3, hidden=(1, 1, 2, 3, 1))
    evaluate = knapsack([0.3, 0.1, 0.5, 0.2])
    tight = search_mask(top, evaluate, 10, exhaustive_limit=0)
    loose = search_mask(top, evaluate, 10, exhaustive_limit=0, margin=1.0)
    assert tight.blocks == loose.blocks
    assert len(loose.candidates) >= len(tight.candidates)


def test_zero_budget_gives_empty_mask():
    top = CfnnTopology(2, 3, hidden=(1, 1, 1))
    res = search_mask(top, knapsack([1.0, 1.0]), budget=0)
    assert res.blocks == () and not res.mask.any()


def test_failing_candidates_are_infeasible():
    top = CfnnTopology(2, 3, hidden=(1, 1, 1))

    def evaluate(blocks):
        if 1 in blocks:
            raise FloatingPointError("diverged")
        return float(len(blocks)), 0.0
    res = search_mask(top, evaluate)
    assert res.blocks == (0,)
    assert any(not c.feasible and c.note.startswith("failed") for c in res.candidates)


def test_mask_search_on_a_real_network():
    X, y = toy_problem(n=30)
    top = CfnnTopology(2, 4, hidden=(2, 1, 1))
    evaluate = make_evaluator(top, X, y, TrainConfig(max_iter=15))
    res = search_mask(top, evaluate)
    assert len(res.candidates) == 4
    assert 0.0 <= res.accuracy <= 1.0


# -- sweep --------------------------------------------------------------------------------------------

def test_sweep_rows_follow_counts():
    X, y = toy_problem(n=30)
    top = CfnnTopology(2, 4, hidden=(2, 1, 1, 1))
    rows = sweep(top, X, y, [0, 2, 4, 6], TrainConfig(max_iter=10))
    assert [r.connections for r in rows] == [0, 2, 4, 6]
    assert all(0 <= r.accuracy <= 1 and 0 <= r.fpr <= 1 for r in rows)
    with pytest.raises(ValueError):
        sweep(top, X, y, [3], TrainConfig(max_iter=1))


def test_interior_maximum():
    mk = lambda acc: [SweepRow(c, a, 0.0, 0.0, 0) for c, a in zip((1, 2, 3), acc)]
    assert interior_maximum(mk([0.5, 0.9, 0.6])).connections == 2
    assert interior_maximum(mk([0.9, 0.5, 0.6])) is None
    assert interior_maximum(mk([0.5, 0.6, 0.9])) is None
    assert interior_maximum(mk([0.5, 0.6])[:2]) is None
