"""Analytic solutions: the Brownian case (R = 0) and the frictionless Merton problem."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrix_kit import inv_sqrtm_pd, sqrtm_psd, sym
from .model import ExecutionSpec, OUParams, SpecError, is_pd


def _require_pd_sigma(ou: OUParams) -> np.ndarray:
    if not is_pd(ou.Sigma) or np.linalg.cond(ou.Sigma) > 1e14:
        raise SpecError("Sigma must be positive definite")
    return np.linalg.inv(ou.Sigma)


@dataclass(frozen=True)
class BrownianClosedForm:
    """Closed-form A(t) when prices have no drift.

    Attributes
    ----------
    Ahat : ndarray
        sqrt(gamma/2) (eta^{-1/2} Sigma eta^{-1/2})^{1/2}.
    Cmat : ndarray
        eta^{-1/2} Gamma eta^{-1/2}.
    etaHalf : ndarray
        eta^{1/2}.
    """

    Ahat: np.ndarray
    Cmat: np.ndarray
    etaHalf: np.ndarray
    T: float

    @classmethod
    def from_params(cls, ou: OUParams, ex: ExecutionSpec) -> "BrownianClosedForm":
        if np.any(ou.R != 0.0):
            raise SpecError("closed form requires R = 0")
        if ou.d != ex.d:
            raise SpecError(f"dimension mismatch: OU d={ou.d}, execution d={ex.d}")
        _require_pd_sigma(ou)
        eh = sqrtm_psd(ex.eta)
        ehi = inv_sqrtm_pd(ex.eta)
        Ahat = np.sqrt(0.5 * ex.gamma) * sqrtm_psd(ehi @ ou.Sigma @ ehi)
        Cmat = sym(ehi @ ex.Gamma @ ehi)
        return cls(Ahat, Cmat, eh, ex.T)

    def _tau(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t > self.T * (1 + 1e-12)):
            raise SpecError(f"t must not exceed T={self.T}")
        return np.maximum(self.T - t, 0.0)

    def xi(self, t) -> np.ndarray:
        """xi(t) for scalar t (d x d) or an array of times (n x d x d)."""
        scalar = np.ndim(t) == 0
        tau = self._tau(t)
        a, V = np.linalg.eigh(self.Ahat)
        inv_ca = np.linalg.inv(self.Cmat + self.Ahat)
        # (1 - e^{-2 a tau}) / (2a) and e^{-a tau} in the eigenbasis of Ahat
        g = -np.expm1(-2.0 * np.outer(tau, a)) / (2.0 * a)
        e = np.exp(-np.outer(tau, a))
        first = np.einsum("ij,kj,lj->kil", V, g, V)
        Eh = np.einsum("ij,kj,lj->kil", V, e, V)
        out = -first - Eh @ inv_ca @ Eh
        out = 0.5 * (out + np.swapaxes(out, -1, -2))
        return out[0] if scalar else out

    def A(self, t) -> np.ndarray:
        scalar = np.ndim(t) == 0
        xi = np.atleast_3d(self.xi(np.atleast_1d(t)))
        inner = self.Ahat + np.linalg.inv(xi)
        out = self.etaHalf @ inner @ self.etaHalf
        out = 0.5 * (out + np.swapaxes(out, -1, -2))
        return out[0] if scalar else out


def riccati_flow_xi(ou: OUParams, ex: ExecutionSpec, t) -> np.ndarray:
    return BrownianClosedForm.from_params(ou, ex).xi(t)


def brownian_A(ou: OUParams, ex: ExecutionSpec, t) -> np.ndarray:
    """A(t) in closed form for R = 0; t may be a scalar or an array."""
    return BrownianClosedForm.from_params(ou, ex).A(t)


@dataclass(frozen=True)
class MertonSolution:
    """theta(t, S) = S'Chat S + Ehat'S + Fhat for the frictionless problem."""

    ou: OUParams
    gamma: float
    T: float
    M: np.ndarray  # R' Sigma^{-1} R

    @classmethod
    def build(cls, ou: OUParams, gamma: float, T: float) -> "MertonSolution":
        if not (gamma > 0 and T > 0):
            raise SpecError("gamma and T must be positive")
        Sinv = _require_pd_sigma(ou)
        return cls(ou, float(gamma), float(T), sym(ou.R.T @ Sinv @ ou.R))

    def Chat(self, t: float) -> np.ndarray:
        return (self.T - t) / (2.0 * self.gamma) * self.M

    def Ehat(self, t: float) -> np.ndarray:
        return -(self.T - t) / self.gamma * (self.M @ self.ou.Sbar)

    def Fhat(self, t: float) -> float:
        # integral of F' = -tr(Chat Sigma) - Sbar'M Sbar / (2 gamma) from T back to t
        tau = self.T - t
        Sb = self.ou.Sbar
        return float(
            tau**2 / (4.0 * self.gamma) * np.trace(self.M @ self.ou.Sigma)
            + tau / (2.0 * self.gamma) * Sb @ self.M @ Sb
        )

    def theta(self, t: float, S) -> float:
        S = np.asarray(S, dtype=float)
        return float(S @ self.Chat(t) @ S + self.Ehat(t) @ S + self.Fhat(t))

    def position(self, t: float, S) -> np.ndarray:
        S = np.asarray(S, dtype=float)
        G = (np.eye(self.ou.d) + (self.T - t) * self.ou.R.T) @ np.linalg.solve(self.ou.Sigma, self.ou.R)
        return G @ (self.ou.Sbar - S) / self.gamma


def merton_theta(ou: OUParams, gamma: float, T: float, t: float, S) -> float:
    return MertonSolution.build(ou, gamma, T).theta(t, S)


def merton_position(ou: OUParams, gamma: float, T: float, t: float, S) -> np.ndarray:
    """Optimal frictionless holding (1/gamma)(I + (T-t)R')Sigma^{-1}R(Sbar - S)."""
    return MertonSolution.build(ou, gamma, T).position(t, S)
