import numpy as np
import pytest

from ouexec.matrix_kit import integrated_covariance, matrix_exp
from ouexec.model import ExecutionSpec, ExecutionState, MarketPath, OUParams, SpecError, TimeGrid, terminal_wealth
from ouexec.riccati import solve_backward
from ouexec.simulation import (
    OUStepper,
    histogram,
    monte_carlo_pnl,
    ou_step_exact,
    path_noise,
    rollout,
    simulate_paths,
    simulate_prices,
)
from ouexec.strategy import Strategy, StrategyConfig, build_strategy


def _hold(grid, d):
    n = grid.N + 1
    return Strategy(grid.times, np.zeros((n, d, d)), np.zeros((n, d, d)), np.zeros((n, d)))


def test_step_trivial_cases(pair):
    S = np.array([50.0, 30.0])
    np.testing.assert_array_equal(ou_step_exact(pair.ou, S, 0.0, np.ones(2)), S)
    quiet = pair.ou.with_(Sigma=np.zeros((2, 2)))
    dt = 0.1
    exp = quiet.Sbar + matrix_exp(-quiet.R * dt) @ (S - quiet.Sbar)
    np.testing.assert_allclose(ou_step_exact(quiet, S, dt, np.ones(2)), exp, rtol=1e-14)


def _moments_close(x, mean, cov):
    n = x.shape[0]
    m = x.mean(axis=0)
    se = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(m - mean) <= 4 * se)
    c = np.cov(x, rowvar=False)
    se_c = np.sqrt((cov**2 + np.outer(np.diag(cov), np.diag(cov))) / n)
    assert np.all(np.abs(c - cov) <= 4 * se_c)


def test_one_step_moments(pair):
    dt = 1 / 510
    S = np.array([54.4, 27.48])
    Z = np.random.default_rng(1).standard_normal((100_000, 2))
    x = OUStepper(pair.ou, dt).step(S, Z)
    mean = pair.ou.Sbar + matrix_exp(-pair.ou.R * dt) @ (S - pair.ou.Sbar)
    _moments_close(x, mean, integrated_covariance(pair.ou, dt).value)


def test_half_steps_agree(pair):
    dt = 0.05
    S = np.array([54.4, 27.48])
    rng = np.random.default_rng(2)
    one = OUStepper(pair.ou, dt).step(S, rng.standard_normal((100_000, 2)))
    half = OUStepper(pair.ou, dt / 2)
    two = half.step(half.step(S, rng.standard_normal((100_000, 2))), rng.standard_normal((100_000, 2)))
    n = one.shape[0]
    se = np.sqrt(one.var(axis=0) / n + two.var(axis=0) / n)
    assert np.all(np.abs(one.mean(0) - two.mean(0)) <= 4 * se)
    v1, v2 = one.var(axis=0), two.var(axis=0)
    assert np.all(np.abs(v1 - v2) <= 4 * np.sqrt(2 / n) * np.sqrt(v1**2 + v2**2))


def test_hold_strategy_marks_to_market(cdu1):
    grid = TimeGrid(1.0, 100)
    tr = rollout(_hold(grid, 1), cdu1.ou, cdu1.ex, ExecutionState(0.0, cdu1.q0, cdu1.S0, X=5.0), grid, seed=3)
    assert np.all(tr.q == cdu1.q0) and np.all(tr.X == 5.0)
    assert tr.pnl[0] == 0.0
    assert tr.pnl[-1] == pytest.approx(cdu1.q0[0] * (tr.Stilde[-1, 0] - tr.Stilde[0, 0]), rel=1e-12)
    np.testing.assert_array_equal(tr.Stilde, tr.S)


def test_inventory_update_exact(cdu1):
    grid = TimeGrid(1.0, 200)
    sol = solve_backward(cdu1.ou, cdu1.ex, grid)
    st = build_strategy(StrategyConfig(), cdu1.ou, cdu1.ex, cdu1.q0, grid, sol)
    tr = rollout(st, cdu1.ou, cdu1.ex, ExecutionState(0.0, cdu1.q0, cdu1.S0), grid, seed=1)
    np.testing.assert_array_equal(tr.q[1:], tr.q[:-1] + tr.v * grid.dt)


def test_accounting_identity_with_impact(cdu1):
    K = np.array([[0.02]])
    ex = cdu1.ex.with_(K=K)
    grid = TimeGrid(1.0, 300)
    sol = solve_backward(cdu1.ou, ex, grid)
    st = build_strategy(StrategyConfig(), cdu1.ou, ex, cdu1.q0, grid, sol)
    for seed in range(5):
        tr = rollout(st, cdu1.ou, ex, ExecutionState(0.0, cdu1.q0, cdu1.S0), grid, seed=seed)
        market = terminal_wealth(tr.final_state(market=True), ex, True)
        fund = terminal_wealth(tr.final_state(market=False), ex, False)
        expect = -0.5 * cdu1.q0 @ K @ cdu1.q0
        assert market - fund == pytest.approx(expect, rel=1e-8, abs=1e-8 * abs(market))


def test_market_price_includes_impact(cdu1):
    K = np.array([[0.02]])
    ex = cdu1.ex.with_(K=K)
    grid = TimeGrid(1.0, 50)
    st = build_strategy(StrategyConfig("twap"), cdu1.ou, ex, cdu1.q0, grid)
    tr = rollout(st, cdu1.ou, ex, ExecutionState(0.0, cdu1.q0, cdu1.S0), grid, seed=0)
    np.testing.assert_allclose(tr.Stilde - tr.S, (tr.q - tr.q[0]) @ K.T, atol=1e-9)


def test_rollout_on_supplied_path(cdu1):
    grid = TimeGrid(1.0, 8400)
    sol = solve_backward(cdu1.ou, cdu1.ex, grid)
    st = build_strategy(StrategyConfig(), cdu1.ou, cdu1.ex, cdu1.q0, grid, sol)
    bars = simulate_prices(cdu1.ou, cdu1.S0, TimeGrid(1.0, 840), seed=4)
    tr = rollout(st, cdu1.ou, cdu1.ex, ExecutionState(0.0, cdu1.q0, cdu1.S0), path=bars)
    assert tr.N == 840 and abs(tr.q[-1, 0]) < 0.01 * cdu1.q0[0]
    coarse_grid = TimeGrid(1.0, 84)
    coarse = build_strategy(StrategyConfig(), cdu1.ou, cdu1.ex, cdu1.q0, coarse_grid,
                            solve_backward(cdu1.ou, cdu1.ex, coarse_grid))
    with pytest.raises(SpecError, match="finely"):
        rollout(coarse, cdu1.ou, cdu1.ex, ExecutionState(0.0, cdu1.q0, cdu1.S0), path=bars)
    long = MarketPath(bars.times * 2, bars.prices)
    with pytest.raises(SpecError, match="beyond"):
        rollout(st, cdu1.ou, cdu1.ex, ExecutionState(0.0, cdu1.q0, cdu1.S0), path=long)


def test_rollout_noise_shape(cdu1):
    grid = TimeGrid(1.0, 10)
    with pytest.raises(SpecError, match="noise"):
        rollout(_hold(grid, 1), cdu1.ou, cdu1.ex, ExecutionState(0.0, cdu1.q0, cdu1.S0), grid, noise=np.zeros((5, 1)))


def test_rollout_and_batch_agree(cdu1):
    grid = TimeGrid(1.0, 120)
    sol = solve_backward(cdu1.ou, cdu1.ex, grid)
    st = build_strategy(StrategyConfig(), cdu1.ou, cdu1.ex, cdu1.q0, grid, sol)
    init = ExecutionState(0.0, cdu1.q0, cdu1.S0)
    out = simulate_paths(st, cdu1.ou, cdu1.ex, init, grid, 3, seed=9)
    for i in range(3):
        tr = rollout(st, cdu1.ou, cdu1.ex, init, grid, noise=path_noise(9, i, grid.N, 1))
        assert tr.pnl[-1] == pytest.approx(out.pnl[i], rel=1e-12)


def test_no_noise_no_mispricing_zero_pnl(cdu1):
    ou = cdu1.ou.with_(Sigma=[[0.0]])
    cfg = StrategyConfig(mode="statarb")
    grid = TimeGrid(1.0, 100)
    ex, q0 = cfg.resolve(cdu1.ex, cdu1.q0)
    sol = solve_backward(ou, ex, grid)
    st = build_strategy(cfg, ou, cdu1.ex, cdu1.q0, grid, sol)
    s = monte_carlo_pnl(st, ou, ex, ExecutionState(0.0, q0, ou.Sbar), grid, 20, seed=1)
    assert np.all(s.values == 0.0) and s.stdev == 0.0
    assert s.counts.sum() == 20


def test_determinism_across_workers(cdu1):
    grid = TimeGrid(1.0, 84)
    cfg = StrategyConfig(mode="statarb")
    ex, q0 = cfg.resolve(cdu1.ex, cdu1.q0)
    st = build_strategy(cfg, cdu1.ou, cdu1.ex, cdu1.q0, grid, solve_backward(cdu1.ou, ex, grid))
    init = ExecutionState(0.0, q0, cdu1.S0)
    a = monte_carlo_pnl(st, cdu1.ou, ex, init, grid, 2500, seed=3, workers=1)
    b = monte_carlo_pnl(st, cdu1.ou, ex, init, grid, 2500, seed=3, workers=3)
    assert a.to_dict() == b.to_dict()
    np.testing.assert_array_equal(a.values, b.values)


def test_histogram():
    edges, counts = histogram(np.array([1.0]))
    assert counts.sum() == 1 and np.count_nonzero(counts) == 1
    v = np.random.default_rng(0).normal(size=1000)
    v[0] = 100.0
    edges, counts = histogram(v, bins=60)
    assert len(edges) == 61 and counts.sum() == 1000 and counts[-1] >= 1


def test_needs_paths(cdu1):
    grid = TimeGrid(1.0, 10)
    with pytest.raises(SpecError):
        simulate_paths(_hold(grid, 1), cdu1.ou, cdu1.ex, ExecutionState(0.0, cdu1.q0, cdu1.S0), grid, 0, 1)
