"""OU parameter estimation from bar data, Bachelier volatility, Johansen trace test."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import logm

from .matrix_kit import sym
from .model import MarketPath, NumericalError, OUParams, SpecError

# 95% trace-test critical values, constant and no trend, keyed by d - r
JOHANSEN_TRACE_95 = {1: 3.8415, 2: 15.4943, 3: 29.7961, 4: 47.8545, 5: 69.8189}

SAMPLING_RTOL = 0.01
IMAG_TOL = 1e-8


@dataclass(frozen=True)
class VAR1Fit:
    """S_{k+1} = a + Phi S_k + eps_k with Cov(eps) = Qres, sampled every ``dt`` days."""

    Phi: np.ndarray
    a: np.ndarray
    Qres: np.ndarray
    dt: float
    nObs: int
    r2: np.ndarray | None = None


@dataclass(frozen=True)
class JohansenResult:
    traceStats: np.ndarray
    criticalValues95: np.ndarray
    selectedRank: int
    cointVectors: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    nObs: int

    def table(self) -> list[dict]:
        """Rows of (null hypothesis, statistic, critical value, conclusion)."""
        rows = []
        for r, (stat, cv) in enumerate(zip(self.traceStats, self.criticalValues95)):
            rows.append({
                "null_hypothesis": f"r <= {r}",
                "trace_statistic": float(stat),
                "critical_value": float(cv),
                "conclusion": "Rejected" if stat > cv else "Not rejected",
            })
        return rows


def sampling_interval(path: MarketPath) -> float:
    """Median bar spacing; raises if spacing varies by more than 1% of it."""
    if path.times.size < 2:
        raise SpecError("path needs at least two observations")
    dts = np.diff(path.times)
    med = float(np.median(dts))
    dev = float(np.max(np.abs(dts - med)))
    if dev > SAMPLING_RTOL * med:
        k = int(np.argmax(np.abs(dts - med)))
        raise SpecError(
            f"non-uniform sampling: interval {dts[k]:.6g} after row {k} deviates from median {med:.6g} by more than 1%"
        )
    return med


def _check_rank(X: np.ndarray, names: list[str]) -> None:
    # greedy: a column is collinear if it adds nothing to the span of those kept so far
    scale = np.maximum(np.linalg.norm(X, axis=0), 1e-300)
    Xs = X / scale
    kept: list[int] = []
    for j in range(Xs.shape[1]):
        cols = kept + [j]
        sv = np.linalg.svd(Xs[:, cols], compute_uv=False)
        if sv[-1] <= 1e-10 * max(sv[0], 1.0) * np.sqrt(X.shape[0]):
            # report the smallest group that is jointly dependent with j
            coef = np.linalg.lstsq(Xs[:, kept], Xs[:, j], rcond=None)[0] if kept else np.zeros(0)
            partners = [names[kept[i]] for i in np.flatnonzero(np.abs(coef) > 1e-8)]
            group = ", ".join(partners + [names[j]])
            raise SpecError(f"rank-deficient regressors: columns ({group}) are collinear")
        kept.append(j)


def fit_var1(path: MarketPath) -> VAR1Fit:
    """Least-squares VAR(1) with intercept, residual covariance over n - d - 1."""
    dt = sampling_interval(path)
    S = path.prices
    d = path.d
    n = S.shape[0] - 1
    if n < d + 2:
        raise SpecError(f"need at least {d + 2} transitions, got {n}")
    X = np.hstack([np.ones((n, 1)), S[:-1]])
    Y = S[1:]
    names = ["const"] + [f"lag({nm})" for nm in path.names]
    _check_rank(X, names)
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    resid = Y - X @ coef
    Qres = sym(resid.T @ resid / (n - d - 1))
    ss_tot = np.sum((Y - Y.mean(axis=0)) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(ss_tot > 0, 1.0 - np.sum(resid**2, axis=0) / ss_tot, np.nan)
    return VAR1Fit(Phi=coef[1:].T.copy(), a=coef[0].copy(), Qres=Qres, dt=dt, nObs=n, r2=r2)


def _real_logm(Phi: np.ndarray) -> np.ndarray:
    lam, V = np.linalg.eig(Phi)
    if np.any(lam.real <= 0):
        raise SpecError(
            f"matrix logarithm undefined: Phi has eigenvalue {lam[np.argmin(lam.real)]:.6g} with non-positive real part"
        )
    if np.linalg.cond(V) < 1e10:
        L = V @ np.diag(np.log(lam)) @ np.linalg.inv(V)
    else:
        # nearly defective: eigenvectors are unreliable
        L = logm(Phi)
    L = np.asarray(L, dtype=complex)
    imag = float(np.max(np.abs(L.imag))) if L.size else 0.0
    if imag > IMAG_TOL:
        raise NumericalError(f"matrix logarithm has imaginary part {imag:.3g}; no real OU generator")
    return L.real


def var1_to_ou(fit: VAR1Fit, strict: bool = True) -> OUParams:
    """Continuous-time parameters R = -log(Phi)/dt, Sbar = (I - Phi)^{-1} a, Sigma = Qres/dt."""
    d = fit.Phi.shape[0]
    IminusPhi = np.eye(d) - fit.Phi
    sv = np.linalg.svd(IminusPhi, compute_uv=False)
    if sv[-1] <= 1e-12 * max(1.0, float(np.linalg.norm(fit.Phi, 2))):
        raise SpecError("no stationary mean (unit root): I - Phi is singular")
    R = -_real_logm(fit.Phi) / fit.dt
    Sbar = np.linalg.solve(IminusPhi, fit.a)
    Sigma = sym(fit.Qres / fit.dt)
    return OUParams(R, Sbar, Sigma, strict=strict)


def fit_bachelier(path: MarketPath) -> np.ndarray:
    """Sample covariance of price increments per unit time."""
    dt = sampling_interval(path)
    dS = np.diff(path.prices, axis=0)
    if dS.shape[0] < 2:
        raise SpecError("need at least two increments")
    return sym(np.atleast_2d(np.cov(dS, rowvar=False, ddof=1)) / dt)


def johansen_trace(path: MarketPath, significance: float = 0.95) -> JohansenResult:
    """Johansen trace test, lag 1, unrestricted constant.

    Reduced-rank regression of dS_t on S_{t-1} after removing the mean from
    both; eigenvalues are the squared canonical correlations. The selected rank
    is the first r whose null ``rank <= r`` is not rejected.
    """
    if significance != 0.95:
        raise SpecError("only the 95% critical values are tabulated")
    S = path.prices
    d = path.d
    if d > 5:
        raise SpecError(f"unsupported dimension d={d}: critical values tabulated for d <= 5")
    n = S.shape[0] - 1
    if n < 10 * d:
        raise SpecError(f"need at least {10 * d} transitions, got {n}")
    R0 = np.diff(S, axis=0)
    R1 = S[:-1]
    R0 = R0 - R0.mean(axis=0)
    R1 = R1 - R1.mean(axis=0)
    S00 = R0.T @ R0 / n
    S11 = R1.T @ R1 / n
    S01 = R0.T @ R1 / n
    for name, M in (("differences", S00), ("levels", S11)):
        w = np.linalg.eigvalsh(M)
        if w[0] <= 1e-12 * max(w[-1], 1e-300):
            raise NumericalError(f"degenerate covariance of {name}")
    # generalized symmetric problem S10 S00^{-1} S01 v = lam S11 v
    Lc = np.linalg.cholesky(S11)
    Li = np.linalg.inv(Lc)
    Mx = Li @ S01.T @ np.linalg.solve(S00, S01) @ Li.T
    lam, W = np.linalg.eigh(sym(Mx))
    order = np.argsort(lam)[::-1]
    lam = np.clip(lam[order], 0.0, 1.0 - 1e-15)
    V = Li.T @ W[:, order]
    stats = np.array([-n * np.sum(np.log1p(-lam[r:])) for r in range(d)])
    cvs = np.array([JOHANSEN_TRACE_95[d - r] for r in range(d)])
    rank = d
    for r in range(d):
        if stats[r] <= cvs[r]:
            rank = r
            break
    V = V / np.where(np.abs(V[0]) > 1e-12, V[0], np.linalg.norm(V, axis=0))
    return JohansenResult(stats, cvs, rank, V[:, :rank].copy(), lam, V, n)
