"""Exact OU sampling, execution rollouts and Monte Carlo PnL studies.

Randomness is drawn per path from a Philox stream keyed by (seed, path index),
and paths are processed in fixed-size chunks, so results do not depend on the
number of worker processes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .matrix_kit import integrated_covariance, matrix_exp, psd_factor
from .model import ExecutionSpec, ExecutionState, MarketPath, NumericalError, OUParams, SpecError, TimeGrid
from .strategy import Strategy

CHUNK = 1024
HIST_BINS = 60


class OUStepper:
    """Exact one-step transition S -> Sbar + e^{-R dt}(S - Sbar) + L z with L L' = Sigma_dt."""

    def __init__(self, ou: OUParams, dt: float):
        if dt < 0:
            raise SpecError(f"dt must be non-negative, got {dt}")
        self.Sbar = ou.Sbar
        self.E = matrix_exp(-ou.R * dt)
        self.L = psd_factor(integrated_covariance(ou, dt).value)

    def step(self, S: np.ndarray, noise: np.ndarray) -> np.ndarray:
        return self.Sbar + (S - self.Sbar) @ self.E.T + noise @ self.L.T


def ou_step_exact(ou: OUParams, S, dt: float, noise) -> np.ndarray:
    return OUStepper(ou, dt).step(np.asarray(S, dtype=float), np.asarray(noise, dtype=float))


def path_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def path_noise(seed: int, index: int, N: int, d: int) -> np.ndarray:
    """Standard normals of shape (N, d) for one path."""
    return path_rng(seed, index).standard_normal((N, d))


def simulate_prices(ou: OUParams, S0, grid: TimeGrid, seed: int, index: int = 0) -> MarketPath:
    S0 = np.asarray(S0, dtype=float)
    st = OUStepper(ou, grid.dt)
    Z = path_noise(seed, index, grid.N, ou.d)
    out = np.empty((grid.N + 1, ou.d))
    out[0] = S0
    for k in range(grid.N):
        out[k + 1] = st.step(out[k], Z[k])
    return MarketPath(grid.times, out)


@dataclass(frozen=True)
class ExecutionTrace:
    """One rollout. ``X`` is cash at the market price, ``Xfund`` at the fundamental price."""

    times: np.ndarray
    q: np.ndarray
    v: np.ndarray
    S: np.ndarray
    Stilde: np.ndarray
    X: np.ndarray
    Xfund: np.ndarray
    pnl: np.ndarray

    @property
    def N(self) -> int:
        return self.times.size - 1

    def final_state(self, market: bool = True) -> ExecutionState:
        X = self.X[-1] if market else self.Xfund[-1]
        return ExecutionState(self.times[-1], self.q[-1], self.S[-1], X, self.Stilde[-1])


@dataclass
class _Batch:
    q: np.ndarray
    S: np.ndarray
    St: np.ndarray
    X: np.ndarray
    Xf: np.ndarray


def _run(strategy: Strategy, ex: ExecutionSpec, times: np.ndarray, state: _Batch, next_prices,
         record: bool = False, first_path: int = 0, dts=None):
    """Advance a batch of paths over ``times``; ``next_prices(k, S)`` returns S at step k+1."""
    N = times.size - 1
    dts = np.diff(times) if dts is None else dts
    Gq, GS, g0 = strategy.gains(times[:-1])
    eta, K = ex.eta, ex.K
    hasK = bool(np.any(K))
    hist = None
    if record:
        hist = {"q": [state.q.copy()], "v": [], "S": [state.S.copy()], "St": [state.St.copy()],
                "X": [state.X.copy()], "Xf": [state.Xf.copy()]}
    for k in range(N):
        dt = dts[k]
        v = strategy.apply(Gq[k], GS[k], g0[k], state.q, state.S, dt)
        dq = v * dt
        Snew = next_prices(k, state.S)
        cost = np.einsum("pi,ij,pj->p", v, eta, v) * dt
        if hasK:
            Kdq = dq @ K.T
            state.X = state.X - np.einsum("pi,pi->p", dq, state.St + 0.5 * Kdq) - cost
            state.St = state.St + (Snew - state.S) + Kdq
        else:
            state.X = state.X - np.einsum("pi,pi->p", dq, state.St) - cost
            state.St = state.St + (Snew - state.S)
        state.Xf = state.Xf - np.einsum("pi,pi->p", dq, state.S) - cost
        state.q = state.q + dq
        state.S = Snew
        if not (np.all(np.isfinite(state.q)) and np.all(np.isfinite(state.X)) and np.all(np.isfinite(state.S))):
            bad = int(np.flatnonzero(~(np.isfinite(state.q).all(1) & np.isfinite(state.X)
                                       & np.isfinite(state.S).all(1)))[0])
            raise NumericalError(f"non-finite state at step {k + 1} on path {first_path + bad}")
        if record:
            hist["v"].append(v)
            for key, val in (("q", state.q), ("S", state.S), ("St", state.St), ("X", state.X), ("Xf", state.Xf)):
                hist[key].append(val.copy())
    return hist


def _initial_batch(initial: ExecutionState, P: int) -> _Batch:
    def rep(a):
        return np.repeat(np.asarray(a, dtype=float)[None], P, axis=0)

    return _Batch(rep(initial.q), rep(initial.S), rep(initial.Stilde), np.full(P, initial.X), np.full(P, initial.X))


def rollout(strategy: Strategy, ou: OUParams, ex: ExecutionSpec, initial: ExecutionState,
            grid: TimeGrid | None = None, path: MarketPath | None = None, noise=None,
            seed: int | None = None) -> ExecutionTrace:
    """Run one execution either along a supplied price path or on simulated prices.

    With ``path`` the control is evaluated at the bar times, shifted to start at
    zero; the strategy grid must be at least as fine as the bars. The
    market price offset initial.Stilde - initial.S is carried over. Without a
    path, prices follow the exact OU transition on ``grid`` driven by ``noise``
    (shape (N, d)) or by the stream for ``seed``.
    """
    d = ex.d
    if path is not None:
        if path.d != d:
            raise SpecError(f"path has {path.d} assets, strategy expects {d}")
        times = path.times - path.times[0]
        if times[-1] > strategy.T * (1 + 1e-9):
            raise SpecError(f"path spans {times[-1]:.6g} days, beyond the horizon {strategy.T:.6g}")
        # coefficients are interpolated between nodes, which is only safe when
        # the strategy grid resolves the bars (A changes sharply just before T)
        node_dt = float(np.max(np.diff(strategy.times)))
        if float(np.min(np.diff(times))) < node_dt * (1 - 1e-6):
            raise SpecError("path is sampled more finely than the strategy grid; solve on a finer grid")
        prices = path.prices
        offset = initial.Stilde - initial.S
        init = ExecutionState(0.0, initial.q, prices[0], initial.X, prices[0] + offset)

        def next_prices(k, S):
            return prices[k + 1][None]
    else:
        if grid is None:
            raise SpecError("either a price path or a grid is required")
        if abs(grid.T - strategy.T) > 1e-12 * max(1.0, grid.T):
            raise SpecError(f"grid horizon {grid.T} differs from strategy horizon {strategy.T}")
        times = grid.times
        if noise is None:
            noise = path_noise(0 if seed is None else seed, 0, grid.N, d)
        noise = np.asarray(noise, dtype=float)
        if noise.shape != (grid.N, d):
            raise SpecError(f"noise must have shape {(grid.N, d)}, got {noise.shape}")
        st = OUStepper(ou, grid.dt)
        init = initial

        def next_prices(k, S):
            return st.step(S, noise[k][None])

    b = _initial_batch(init, 1)
    dts = None if path is not None else np.full(grid.N, grid.dt)
    h = _run(strategy, ex, times, b, next_prices, record=True, dts=dts)
    q = np.array(h["q"])[:, 0]
    St = np.array(h["St"])[:, 0]
    X = np.array(h["X"])[:, 0]
    v = np.array(h["v"])[:, 0] if h["v"] else np.zeros((0, d))
    pnl = X + np.einsum("ki,ki->k", q, St) - X[0] - q[0] @ St[0]
    return ExecutionTrace(times.copy(), q, v, np.array(h["S"])[:, 0], St, X, np.array(h["Xf"])[:, 0], pnl)


@dataclass(frozen=True)
class BatchOutcome:
    """Terminal quantities for a block of simulated paths."""

    qT: np.ndarray
    ST: np.ndarray
    StT: np.ndarray
    XT: np.ndarray
    XfT: np.ndarray
    pnl: np.ndarray


def _simulate_chunk(args) -> BatchOutcome:
    strategy, ou, ex, initial, grid, seed, start, count = args
    d = ex.d
    Z = np.stack([path_noise(seed, i, grid.N, d) for i in range(start, start + count)], axis=1)
    st = OUStepper(ou, grid.dt)
    b = _initial_batch(initial, count)

    def next_prices(k, S):
        return st.step(S, Z[k])

    _run(strategy, ex, grid.times, b, next_prices, first_path=start, dts=np.full(grid.N, grid.dt))
    pnl = b.X + np.einsum("pi,pi->p", b.q, b.St) - initial.X - initial.q @ initial.Stilde
    return BatchOutcome(b.q, b.S, b.St, b.X, b.Xf, pnl)


def simulate_paths(strategy: Strategy, ou: OUParams, ex: ExecutionSpec, initial: ExecutionState,
                   grid: TimeGrid, n_paths: int, seed: int, workers: int = 1) -> BatchOutcome:
    """Terminal outcomes of ``n_paths`` independent rollouts, in path order."""
    if n_paths < 1:
        raise SpecError("need at least one path")
    if abs(grid.T - strategy.T) > 1e-12 * max(1.0, grid.T):
        raise SpecError(f"grid horizon {grid.T} differs from strategy horizon {strategy.T}")
    jobs = [(strategy, ou, ex, initial, grid, seed, s, min(CHUNK, n_paths - s)) for s in range(0, n_paths, CHUNK)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_simulate_chunk, jobs))
    else:
        parts = [_simulate_chunk(j) for j in jobs]
    return BatchOutcome(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                          ("qT", "ST", "StT", "XT", "XfT", "pnl")))


@dataclass(frozen=True)
class PnLSummary:
    nPaths: int
    mean: float
    stdev: float
    skewness: float
    bin_edges: np.ndarray
    counts: np.ndarray
    seed: int
    values: np.ndarray = field(repr=False, compare=False, default=None)

    def to_dict(self) -> dict:
        return {
            "nPaths": self.nPaths,
            "mean": self.mean,
            "stdev": self.stdev,
            "skewness": self.skewness,
            "seed": self.seed,
            "histogram": {"bin_edges": self.bin_edges.tolist(), "counts": self.counts.tolist()},
        }


def histogram(values: np.ndarray, bins: int = HIST_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width bins over mean +/- 4 sd; values outside land in the edge bins."""
    m = float(np.mean(values))
    s = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    lo, hi = (m - 4 * s, m + 4 * s) if s > 0 else (m - 0.5, m + 0.5)
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, bins - 1)
    return edges, np.bincount(idx, minlength=bins)


def summarize(values: np.ndarray, seed: int, bins: int = HIST_BINS) -> PnLSummary:
    n = values.size
    mean = float(np.mean(values))
    sd = float(np.std(values, ddof=1)) if n > 1 else 0.0
    if n > 2 and sd > 0:
        c = values - mean
        skew = float(np.mean(c**3) / np.mean(c**2) ** 1.5)
    else:
        skew = 0.0
    edges, counts = histogram(values, bins)
    return PnLSummary(n, mean, sd, skew, edges, counts, int(seed), values)


def monte_carlo_pnl(strategy: Strategy, ou: OUParams, ex: ExecutionSpec, initial: ExecutionState,
                    grid: TimeGrid, n_paths: int, seed: int, workers: int = 1,
                    bins: int = HIST_BINS) -> PnLSummary:
    out = simulate_paths(strategy, ou, ex, initial, grid, n_paths, seed, workers)
    return summarize(out.pnl, seed, bins)


def utilities(outcome: BatchOutcome, initial: ExecutionState, ex: ExecutionSpec) -> np.ndarray:
    """-exp(-gamma (W_T - W_0)) with W the penalised fundamental wealth.

    Subtracting the initial mark-to-market wealth W_0 = X_0 + q_0'S_0 only
    rescales every utility by the same positive constant.
    """
    q = outcome.qT
    WT = outcome.XfT + np.einsum("pi,pi->p", q, outcome.ST) - np.einsum("pi,ij,pj->p", q, ex.Gamma, q)
    W0 = initial.X + initial.q @ initial.S
    expo = -ex.gamma * (WT - W0)
    if np.any(expo > 700):
        raise NumericalError("utility exponent overflows; reduce gamma or the position size")
    return -np.exp(expo)


def compare_utilities(u_ref: np.ndarray, u_alt: np.ndarray) -> tuple[float, float]:
    """Mean paired difference E[u_ref - u_alt] and its standard error."""
    diff = u_ref - u_alt
    return float(np.mean(diff)), float(np.std(diff, ddof=1) / math.sqrt(diff.size))
