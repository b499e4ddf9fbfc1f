"""Domain types shared by every module.

Units: time in days, prices in currency per share, inventories in shares,
trading rates in shares/day.
"""

from __future__ import annotations

from dataclasses import InitVar, dataclass, field

import numpy as np

PSD_RTOL = 1e-10


class SpecError(ValueError):
    """Invalid model parameters or inputs (CLI exit code 2)."""


class NumericalError(ArithmeticError):
    """A numerical procedure failed (CLI exit code 3)."""


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if ndim == 2 and arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif ndim == 1 and arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != ndim:
        raise SpecError(f"{name} must have {ndim} dimension(s), got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def min_eig_scaled(M: np.ndarray) -> tuple[float, float]:
    """Return (min eigenvalue, spectral radius) of the symmetric part of M."""
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    return float(w[0]), float(np.max(np.abs(w))) if w.size else 0.0


def is_psd(M: np.ndarray, rtol: float = PSD_RTOL) -> bool:
    lo, rad = min_eig_scaled(M)
    return lo >= -rtol * rad


def is_pd(M: np.ndarray) -> bool:
    lo, _ = min_eig_scaled(M)
    return lo > 0.0


def _asym(M: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(M))), 1.0) if M.size else 1.0
    return float(np.max(np.abs(M - M.T))) / scale if M.size else 0.0


@dataclass(frozen=True)
class OUParams:
    """Multivariate OU dynamics dS = R(Sbar - S) dt + V dW with Sigma = V V^T."""

    R: np.ndarray
    Sbar: np.ndarray
    Sigma: np.ndarray
    strict: InitVar[bool] = True

    def __post_init__(self, strict: bool) -> None:
        object.__setattr__(self, "R", _frozen(self.R, 2, "R"))
        object.__setattr__(self, "Sbar", _frozen(self.Sbar, 1, "Sbar"))
        object.__setattr__(self, "Sigma", _frozen(self.Sigma, 2, "Sigma"))
        d = self.Sbar.shape[0]
        if self.R.shape != (d, d) or self.Sigma.shape != (d, d):
            raise SpecError(
                f"shape mismatch: R {self.R.shape}, Sbar {self.Sbar.shape}, Sigma {self.Sigma.shape}"
            )
        if strict:
            problems = ou_violations(self)
            if problems:
                raise SpecError("; ".join(problems))

    @property
    def d(self) -> int:
        return self.Sbar.shape[0]

    def with_(self, **changes) -> "OUParams":
        kw = dict(R=self.R, Sbar=self.Sbar, Sigma=self.Sigma)
        kw.update(changes)
        return OUParams(**kw)


@dataclass(frozen=True)
class ExecutionSpec:
    """Execution costs eta, permanent impact K, terminal penalty GammaTilde, CARA gamma, horizon T."""

    eta: np.ndarray
    GammaTilde: np.ndarray
    gamma: float
    T: float
    K: np.ndarray | None = None
    strict: InitVar[bool] = True

    def __post_init__(self, strict: bool) -> None:
        eta = _frozen(self.eta, 2, "eta")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "GammaTilde", _frozen(self.GammaTilde, 2, "GammaTilde"))
        K = np.zeros_like(eta) if self.K is None else self.K
        object.__setattr__(self, "K", _frozen(K, 2, "K"))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "T", float(self.T))
        d = eta.shape[0]
        for name in ("eta", "GammaTilde", "K"):
            if getattr(self, name).shape != (d, d):
                raise SpecError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        gamma_mat = 0.5 * ((self.GammaTilde - 0.5 * self.K) + (self.GammaTilde - 0.5 * self.K).T)
        gamma_mat.setflags(write=False)
        object.__setattr__(self, "_Gamma", gamma_mat)
        if strict:
            problems = exec_violations(self)
            if problems:
                raise SpecError("; ".join(problems))

    @property
    def d(self) -> int:
        return self.eta.shape[0]

    @property
    def Gamma(self) -> np.ndarray:
        """Effective penalty GammaTilde - K/2 used in fundamental-price accounting."""
        return self._Gamma

    @property
    def eta_inv(self) -> np.ndarray:
        return np.linalg.inv(self.eta)

    def with_(self, **changes) -> "ExecutionSpec":
        kw = dict(eta=self.eta, GammaTilde=self.GammaTilde, gamma=self.gamma, T=self.T, K=self.K)
        kw.update(changes)
        return ExecutionSpec(**kw)


def ou_violations(ou: OUParams) -> list[str]:
    out = []
    for name in ("R", "Sbar", "Sigma"):
        if not np.all(np.isfinite(getattr(ou, name))):
            out.append(f"{name} has non-finite entries")
    if out:
        return out
    if _asym(ou.Sigma) > 1e-9:
        out.append(f"Sigma not symmetric (max asymmetry {_asym(ou.Sigma):.3g})")
    lo, rad = min_eig_scaled(ou.Sigma)
    if lo < -PSD_RTOL * rad:
        out.append(f"Sigma not PSD (min eigenvalue {lo:.6g})")
    return out


def exec_violations(ex: ExecutionSpec) -> list[str]:
    out = []
    for name in ("eta", "GammaTilde", "K"):
        if not np.all(np.isfinite(getattr(ex, name))):
            out.append(f"{name} has non-finite entries")
    if not np.isfinite(ex.gamma) or ex.gamma <= 0:
        out.append(f"gamma must be positive, got {ex.gamma}")
    if not np.isfinite(ex.T) or ex.T <= 0:
        out.append(f"T must be positive, got {ex.T}")
    if out:
        return out
    for name in ("eta", "K", "GammaTilde"):
        asym = _asym(getattr(ex, name))
        if asym > 1e-9:
            out.append(f"{name} not symmetric (max asymmetry {asym:.3g})")
    lo, _ = min_eig_scaled(ex.eta)
    if lo <= 0:
        out.append(f"eta not positive definite (min eigenvalue {lo:.6g})")
    lo, rad = min_eig_scaled(ex.Gamma)
    if lo < -PSD_RTOL * rad:
        out.append(f"Gamma = GammaTilde - K/2 not PSD (min eigenvalue {lo:.6g})")
    return out


def validate_spec(ou: OUParams, ex: ExecutionSpec) -> list[str]:
    """List every violated standing assumption; an empty list means the pair is usable."""
    out = ou_violations(ou) + exec_violations(ex)
    if ou.d != ex.d:
        out.append(f"dimension mismatch: OU d={ou.d}, execution d={ex.d}")
    return out


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self) -> None:
        if not (np.isfinite(self.T) and self.T > 0):
            raise SpecError(f"horizon must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 2:
            raise SpecError(f"grid needs N >= 2 steps, got {self.N}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "T", float(self.T))

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.N + 1) * (self.T / self.N)
        t[-1] = self.T
        return t


@dataclass(frozen=True)
class MarketPath:
    times: np.ndarray
    prices: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        t = _frozen(self.times, 1, "times")
        p = np.array(self.prices, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        p.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "prices", p)
        if p.ndim != 2 or p.shape[0] != t.shape[0]:
            raise SpecError(f"prices shape {p.shape} does not match {t.shape[0]} timestamps")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise SpecError("times must be strictly increasing")
        if not np.all(np.isfinite(p)) or not np.all(np.isfinite(t)):
            raise SpecError("path contains non-finite values")
        names = tuple(self.names) or tuple(f"asset{i + 1}" for i in range(p.shape[1]))
        if len(names) != p.shape[1]:
            raise SpecError(f"{len(names)} names for {p.shape[1]} price columns")
        object.__setattr__(self, "names", names)

    @property
    def d(self) -> int:
        return self.prices.shape[1]


@dataclass(frozen=True)
class ExecutionState:
    t: float
    q: np.ndarray
    S: np.ndarray
    X: float = 0.0
    Stilde: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "q", _frozen(self.q, 1, "q"))
        object.__setattr__(self, "S", _frozen(self.S, 1, "S"))
        st = self.S if self.Stilde is None else self.Stilde
        object.__setattr__(self, "Stilde", _frozen(st, 1, "Stilde"))
        object.__setattr__(self, "X", float(self.X))
        vals = np.concatenate([self.q, self.S, self.Stilde, [self.X, self.t]])
        if not np.all(np.isfinite(vals)):
            raise SpecError("execution state has non-finite entries")


def terminal_wealth(state: ExecutionState, ex: ExecutionSpec, use_market_price: bool) -> float:
    """Penalised liquidation value of a state.

    With ``use_market_price`` the inventory is marked at the impacted price and
    penalised with GammaTilde; otherwise at the fundamental price with
    Gamma = GammaTilde - K/2. ``state.X`` must be the matching cash account.
    """
    q = state.q
    if use_market_price:
        return float(state.X + q @ state.Stilde - q @ ex.GammaTilde @ q)
    return float(state.X + q @ state.S - q @ ex.Gamma @ q)
