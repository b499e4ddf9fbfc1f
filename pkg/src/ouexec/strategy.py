"""Trading controls built from Riccati solutions, closed forms and simple benchmarks.

Every control is an affine feedback v = Gq(t) q + GS(t) (S - c) + g0(t), optionally
scaled and capped. The Merton control is a position target tracked in one step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .closed_form import BrownianClosedForm, MertonSolution
from .model import ExecutionSpec, OUParams, SpecError, TimeGrid
from .riccati import RiccatiSolution

KINDS = ("optimal_ou", "almgren_chriss", "merton", "twap", "scaled")
MODES = ("liquidation", "statarb")
ETA_COND_MAX = 1e12


def hamiltonian(p, ex: ExecutionSpec) -> tuple[float, np.ndarray]:
    """sup_v v'p - v'eta v, returned as (value, maximiser)."""
    p = np.asarray(p, dtype=float)
    v = 0.5 * np.linalg.solve(ex.eta, p)
    return float(0.5 * p @ v), v


def feedback_rate(sol: RiccatiSolution, t: float, q, S, ex: ExecutionSpec) -> np.ndarray:
    """Optimal trading rate 1/2 eta^{-1} (2 A q + B S + D) at time t."""
    s = sol.state_at(t)
    q = np.asarray(q, dtype=float)
    S = np.asarray(S, dtype=float)
    return 0.5 * np.linalg.solve(ex.eta, 2.0 * s.A @ q + s.B @ S + s.D)


def ac_rate(ou: OUParams, ex: ExecutionSpec, t: float, q) -> np.ndarray:
    """Almgren-Chriss rate eta^{-1} A(t) q with the closed-form A of the driftless model."""
    A = BrownianClosedForm.from_params(ou, ex).A(float(t))
    return np.linalg.solve(ex.eta, A @ np.asarray(q, dtype=float))


@dataclass(frozen=True)
class Strategy:
    """Affine feedback v = Gq q + GS (S - center) + g0 tabulated at node times, linear in between.

    Centring on the long-run mean keeps the map well conditioned when prices are
    large. With ``tracking`` the affine map gives a target inventory and the rate is
    (target - q)/dt for the current step length.
    """

    times: np.ndarray
    Gq: np.ndarray
    GS: np.ndarray
    g0: np.ndarray
    tracking: bool = False
    factor: float = 1.0
    max_rate: np.ndarray | None = None
    label: str = ""
    center: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.center is None:
            object.__setattr__(self, "center", np.zeros(self.g0.shape[-1]))

    @property
    def d(self) -> int:
        return self.g0.shape[-1]

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def gains(self, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Interpolated (Gq, GS, g0) at one time or an array of times."""
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        T = self.T
        if np.any(t < -1e-12 * max(1.0, T)) or np.any(t > T * (1 + 1e-12) + 1e-12):
            raise ValueError(f"time outside strategy horizon [0, {T}]")
        tt = np.clip(t, self.times[0], T)
        k = np.clip(np.searchsorted(self.times, tt, side="right") - 1, 0, len(self.times) - 2)
        w = (tt - self.times[k]) / (self.times[k + 1] - self.times[k])
        exact = np.isclose(tt, self.times[k], rtol=0, atol=1e-12 * max(1.0, T))
        w = np.where(exact, 0.0, w)

        def lerp(a):
            ww = w.reshape((-1,) + (1,) * (a.ndim - 1))
            out = (1.0 - ww) * a[k] + ww * a[k + 1]
            return np.where(ww == 0.0, a[k], out)

        out = (lerp(self.Gq), lerp(self.GS), lerp(self.g0))
        return tuple(o[0] for o in out) if scalar else out

    def apply(self, Gq, GS, g0, q, S, dt):
        """Rates for a batch of states; q and S have shape (..., d)."""
        dS = S - self.center
        if self.tracking:
            v = (dS @ GS.T + g0 - q) / dt
        else:
            v = q @ Gq.T + dS @ GS.T + g0
        if self.factor != 1.0:
            v = self.factor * v
        if self.max_rate is not None:
            v = np.clip(v, -self.max_rate, self.max_rate)
        return v

    def rate(self, t: float, q, S, dt: float | None = None) -> np.ndarray:
        if self.tracking and not dt:
            raise SpecError("tracking strategies need the step length dt")
        Gq, GS, g0 = self.gains(t)
        return self.apply(Gq, GS, g0, np.asarray(q, dtype=float), np.asarray(S, dtype=float), dt)

    __call__ = rate

    def scaled(self, factor: float) -> "Strategy":
        return replace(self, factor=self.factor * float(factor), label=f"{self.label}*{factor:g}")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "optimal_ou"
    mode: str = "liquidation"
    base: "StrategyConfig | None" = None
    factor: float = 1.0
    max_rate: float | None = None
    overrides: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise SpecError(f"unknown strategy kind {self.kind!r}; expected one of {KINDS}")
        if self.mode not in MODES:
            raise SpecError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.kind == "scaled" and self.base is None:
            raise SpecError("scaled strategy needs a base configuration")
        if self.max_rate is not None and not self.max_rate > 0:
            raise SpecError("max_rate must be positive")
        bad = set(self.overrides) - {"GammaTilde", "q0"}
        if bad:
            raise SpecError(f"unsupported overrides {sorted(bad)}")

    def resolve(self, ex: ExecutionSpec, q0) -> tuple[ExecutionSpec, np.ndarray]:
        """Execution spec and initial inventory after overrides and mode rules."""
        q0 = np.asarray(self.overrides.get("q0", q0), dtype=float).reshape(ex.d)
        if "GammaTilde" in self.overrides:
            ex = ex.with_(GammaTilde=self.overrides["GammaTilde"])
        if self.mode == "statarb":
            # no terminal penalty and a flat start; K/2 keeps Gamma = 0
            ex = ex.with_(GammaTilde=0.5 * ex.K)
            q0 = np.zeros(ex.d)
        return ex, q0

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "mode": self.mode, "factor": self.factor, "max_rate": self.max_rate}
        if self.overrides:
            out["overrides"] = {k: np.asarray(v).tolist() for k, v in self.overrides.items()}
        if self.base is not None:
            out["base"] = self.base.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "StrategyConfig":
        base = data.get("base")
        return cls(
            kind=data.get("kind", "optimal_ou"),
            mode=data.get("mode", "liquidation"),
            base=cls.from_dict(base) if base else None,
            factor=float(data.get("factor", 1.0)),
            max_rate=data.get("max_rate"),
            overrides=dict(data.get("overrides", {})),
        )


def _check_eta(ex: ExecutionSpec) -> None:
    c = float(np.linalg.cond(ex.eta))
    if not np.isfinite(c) or c > ETA_COND_MAX:
        raise SpecError(f"eta is ill-conditioned (condition number {c:.3g} > {ETA_COND_MAX:g})")


def build_strategy(config: StrategyConfig, ou: OUParams, ex: ExecutionSpec, q0, grid: TimeGrid,
                   sol: RiccatiSolution | None = None, ac_sigma=None) -> Strategy:
    """Tabulate the control described by ``config`` on ``grid``.

    ``ex`` and ``q0`` are the raw inputs; mode rules are applied here, so for
    ``optimal_ou`` the supplied solution must have been computed with the
    resolved terminal penalty (checked through A(T)).
    """
    ex, q0 = config.resolve(ex, q0)
    _check_eta(ex)
    d = ex.d
    if ou.d != d:
        raise SpecError(f"dimension mismatch: OU d={ou.d}, execution d={d}")
    times = grid.times
    n = times.size
    z = np.zeros((n, d, d))
    zv = np.zeros((n, d))
    cap = None if config.max_rate is None else np.full(d, float(config.max_rate))

    if config.kind == "scaled":
        base = build_strategy(replace(config.base, mode=config.mode), ou, ex, q0, grid, sol, ac_sigma)
        out = base.scaled(config.factor)
        return replace(out, max_rate=cap if cap is not None else out.max_rate)

    if config.kind == "optimal_ou":
        if sol is None:
            raise SpecError("optimal_ou strategy needs a Riccati solution")
        if abs(sol.grid.T - ex.T) > 1e-12 * max(1.0, ex.T):
            raise SpecError(f"solution horizon {sol.grid.T} differs from T={ex.T}")
        if not np.allclose(sol.A[-1], -ex.Gamma, rtol=1e-9, atol=1e-12):
            raise SpecError("Riccati solution was computed with a different terminal penalty")
        A, B, D = sol.A, sol.B, sol.D
        if sol.grid != grid:
            st = [sol.state_at(t) for t in times]
            A = np.array([s.A for s in st])
            B = np.array([s.B for s in st])
            D = np.array([s.D for s in st])
        ei = ex.eta_inv
        # B S + D = B (S - Sbar) + (D + B Sbar); the second term vanishes for exact solutions
        resid = D + B @ ou.Sbar
        return Strategy(times, ei @ A, 0.5 * ei @ B, 0.5 * resid @ ei.T, max_rate=cap, label="optimal_ou",
                        center=ou.Sbar.copy())

    if config.kind == "almgren_chriss":
        sig = ou.Sigma if ac_sigma is None else np.atleast_2d(np.asarray(ac_sigma, dtype=float))
        ou_bm = OUParams(np.zeros((d, d)), ou.Sbar, sig)
        cf = BrownianClosedForm.from_params(ou_bm, ex)
        A = cf.A(times)
        return Strategy(times, ex.eta_inv @ A, z, zv, max_rate=cap, label="almgren_chriss")

    if config.kind == "twap":
        g0 = np.broadcast_to(-q0 / ex.T, (n, d)).copy()
        return Strategy(times, z, z.copy(), g0, max_rate=cap, label="twap")

    # merton: target q*(t, S) = (1/gamma)(I + (T-t)R')Sigma^{-1}R(Sbar - S)
    ms = MertonSolution.build(ou, ex.gamma, ex.T)
    SiR = np.linalg.solve(ou.Sigma, ou.R)
    tau = ex.T - times
    GS = -(np.eye(d)[None] + tau[:, None, None] * ou.R.T[None]) @ SiR / ms.gamma
    if cap is None and np.any(q0):
        cap = np.full(d, 10.0 * float(np.max(np.abs(q0))) / ex.T)
    return Strategy(times, z, GS, zv, tracking=True, max_rate=cap, label="merton", center=ou.Sbar.copy())


@dataclass(frozen=True)
class Preset:
    """A parameter set from the calibrated examples, with its bar count per day."""

    ou: OUParams
    ex: ExecutionSpec
    q0: np.ndarray
    S0: np.ndarray
    bars: int
    names: tuple[str, ...]
    sigma_ac: np.ndarray | None = None


def cdu1_preset() -> Preset:
    """Single future, 60-second bars over a 14-hour day."""
    ou = OUParams([[5.1]], [79887.0], [[243.67**2]])
    ex = ExecutionSpec([[5e-3]], [[100.0]], 2e-5, 1.0)
    return Preset(ou, ex, np.array([2250.0]), np.array([79835.0]), 840, ("CDU1",), np.array([[244.02**2]]))


def bnp_gle_preset(gamma: float = 2e-5) -> Preset:
    """Two stocks, 60-second bars over an 8.5-hour day."""
    ou = OUParams([[0.33, 3.95], [-2.52, 10.23]], [54.23, 27.45], [[0.47, 0.2], [0.2, 0.14]])
    ex = ExecutionSpec(np.diag([4e-7, 2e-7]), 100.0 * np.eye(2), gamma, 1.0)
    return Preset(ou, ex, np.array([75000.0, 75000.0]), np.array([54.4, 27.48]), 510, ("BNP", "GLE"))


PRESETS = {"cdu1": cdu1_preset, "bnp_gle": bnp_gle_preset}
