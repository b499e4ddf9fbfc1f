import numpy as np
import pytest
from scipy.linalg import solve_continuous_lyapunov

from ouexec.estimation import fit_bachelier, fit_var1, johansen_trace, var1_to_ou, VAR1Fit
from ouexec.matrix_kit import matrix_exp
from ouexec.model import MarketPath, NumericalError, OUParams, SpecError, TimeGrid
from ouexec.simulation import simulate_prices


def _recursion(Phi, a, S0, n, dt):
    S = [np.asarray(S0, dtype=float)]
    for _ in range(n):
        S.append(a + Phi @ S[-1])
    return MarketPath(np.arange(n + 1) * dt, np.array(S))


def test_constant_path_rank_error():
    with pytest.raises(SpecError, match=r"\(const, lag\(asset1\)\) are collinear"):
        fit_var1(MarketPath(np.arange(20.0), np.full((20, 2), 3.0)))


def test_non_uniform_sampling():
    t = np.arange(30.0)
    t[10] += 0.5
    with pytest.raises(SpecError, match="non-uniform"):
        fit_var1(MarketPath(t, np.random.default_rng(0).normal(size=(30, 1))))


def test_exact_recursion_recovered():
    Phi = np.array([[0.9, 0.05], [0.02, 0.8]])
    a = np.array([1.0, 2.0])
    fit = fit_var1(_recursion(Phi, a, [3.0, 40.0], 40, 0.01))
    np.testing.assert_allclose(fit.Phi, Phi, atol=1e-10)
    np.testing.assert_allclose(fit.a, a, atol=1e-10)
    assert np.abs(fit.Qres).max() < 1e-20


def test_roundtrip_exact_discretisation(pair):
    ou, dt = pair.ou, 1 / 510
    Phi = matrix_exp(-ou.R * dt)
    a = (np.eye(2) - Phi) @ ou.Sbar
    fit = VAR1Fit(Phi, a, ou.Sigma * dt, dt, 100)
    back = var1_to_ou(fit)
    np.testing.assert_allclose(back.R, ou.R, rtol=1e-8, atol=1e-8)
    np.testing.assert_allclose(back.Sbar, ou.Sbar, rtol=1e-8)
    np.testing.assert_allclose(back.Sigma, ou.Sigma, rtol=1e-12)


def test_scalar_conversion():
    r, dt, Sb = 2.0, 0.01, 7.0
    e = np.exp(-r * dt)
    ou = var1_to_ou(VAR1Fit(np.array([[e]]), np.array([Sb * (1 - e)]), np.array([[1e-4]]), dt, 50))
    assert ou.R[0, 0] == pytest.approx(r, rel=1e-12)
    assert ou.Sbar[0] == pytest.approx(Sb, rel=1e-12)


def test_unit_root_and_log_errors():
    with pytest.raises(SpecError, match="unit root"):
        var1_to_ou(VAR1Fit(np.eye(2), np.array([1.0, 0.0]), np.eye(2), 0.1, 50))
    with pytest.raises(SpecError, match="logarithm undefined"):
        var1_to_ou(VAR1Fit(np.diag([0.5, -0.3]), np.zeros(2), np.eye(2), 0.1, 50))


def test_complex_generator_is_real():
    # rotation-type generator: complex eigenvalues, real logarithm
    R = np.array([[1.0, 2.0], [-2.0, 1.0]])
    Phi = matrix_exp(-R * 0.05)
    ou = var1_to_ou(VAR1Fit(Phi, np.zeros(2), np.eye(2) * 0.05, 0.05, 50))
    np.testing.assert_allclose(ou.R, R, atol=1e-10)


def test_affine_equivariance(pair):
    mp = simulate_prices(pair.ou, pair.S0, TimeGrid(2.0, 1020), seed=3)
    c, b = 2.0, 10.0
    f1 = fit_var1(mp)
    f2 = fit_var1(MarketPath(mp.times, c * mp.prices + b))
    np.testing.assert_allclose(f2.Phi, f1.Phi, atol=1e-8)
    np.testing.assert_allclose(f2.a, c * f1.a + (np.eye(2) - f1.Phi) @ np.full(2, b), rtol=1e-7, atol=1e-8)
    np.testing.assert_allclose(f2.Qres, c**2 * f1.Qres, rtol=1e-8)


def test_noisy_recovery(pair):
    mp = simulate_prices(pair.ou, pair.S0, TimeGrid(4.0, 4 * 840), seed=2024)
    ou = var1_to_ou(fit_var1(mp))
    rel = np.linalg.norm(ou.R - pair.ou.R) / np.linalg.norm(pair.ou.R)
    # asymptotic OLS covariance of vec(R): inv(stationary cov) kron Sigma / horizon
    G = solve_continuous_lyapunov(pair.ou.R, pair.ou.Sigma)
    expected = np.sqrt(np.trace(np.kron(np.linalg.inv(G), pair.ou.Sigma)) / 4.0) / np.linalg.norm(pair.ou.R)
    assert rel <= 3 * expected
    np.testing.assert_allclose(ou.Sigma, pair.ou.Sigma, rtol=0.1, atol=0.01)


def test_bachelier_linear_and_brownian():
    t = np.arange(100) / 100
    assert np.abs(fit_bachelier(MarketPath(t, 5.0 + 3.0 * t))).max() < 1e-20
    rng = np.random.default_rng(99)
    n, dt, sig = 100_000, 1 / 840, 244.02
    S = np.concatenate([[0.0], np.cumsum(sig * np.sqrt(dt) * rng.standard_normal(n))])
    est = np.sqrt(fit_bachelier(MarketPath(np.arange(n + 1) * dt, S))[0, 0])
    assert est == pytest.approx(sig, rel=0.02)


def _ols_logdet_stat(S):
    # r <= 0 trace statistic as a likelihood ratio of two OLS fits of dS
    dS = np.diff(S, axis=0)
    n = dS.shape[0]
    X0 = np.ones((n, 1))
    X1 = np.hstack([X0, S[:-1]])

    def resid_cov(X):
        beta = np.linalg.lstsq(X, dS, rcond=None)[0]
        e = dS - X @ beta
        return e.T @ e / n

    return n * (np.linalg.slogdet(resid_cov(X0))[1] - np.linalg.slogdet(resid_cov(X1))[1])


def test_johansen_against_regression_identity(pair):
    mp = simulate_prices(pair.ou, pair.S0, TimeGrid(3000 / 510, 3000), seed=7)
    jr = johansen_trace(mp)
    assert jr.traceStats[0] == pytest.approx(_ols_logdet_stat(mp.prices), rel=1e-9)
    np.testing.assert_allclose(jr.criticalValues95, [15.4943, 3.8415])
    rows = jr.table()
    assert [r["null_hypothesis"] for r in rows] == ["r <= 0", "r <= 1"]


def test_johansen_invariant_to_recombination(pair, rng):
    mp = simulate_prices(pair.ou, pair.S0, TimeGrid(1.0, 600), seed=8)
    M = rng.normal(size=(2, 2)) + 2 * np.eye(2)
    a = johansen_trace(mp).traceStats
    b = johansen_trace(MarketPath(mp.times, mp.prices @ M.T)).traceStats
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_johansen_rank_rule():
    rng = np.random.default_rng(5)
    n = 2000
    x = np.cumsum(rng.normal(size=n))
    S = np.column_stack([x, 0.5 * x + rng.normal(size=n)])
    jr = johansen_trace(MarketPath(np.arange(n) / 510, S))
    assert jr.selectedRank == 1
    v = jr.cointVectors[:, 0]
    assert v[0] == 1.0 and v[1] == pytest.approx(-2.0, rel=0.05)


def test_johansen_errors():
    with pytest.raises(SpecError, match="unsupported dimension"):
        johansen_trace(MarketPath(np.arange(100.0), np.random.default_rng(0).normal(size=(100, 6))))
    with pytest.raises(SpecError, match="at least"):
        johansen_trace(MarketPath(np.arange(10.0), np.random.default_rng(0).normal(size=(10, 2))))
    x = np.cumsum(np.random.default_rng(1).normal(size=200))
    with pytest.raises(NumericalError, match="degenerate"):
        johansen_trace(MarketPath(np.arange(200.0), np.column_stack([x, 2 * x])))
