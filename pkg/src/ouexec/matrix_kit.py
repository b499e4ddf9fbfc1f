"""Dense matrix kernels: exponential, integrated OU covariance, PSD order."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import NumericalError, OUParams, SpecError

# Higham (2005) degree-13 Pade coefficients and the 1-norm threshold theta_13.
_PADE13 = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
_THETA13 = 5.371920351148152
_MAX_NORM = 700.0 * 64  # beyond this e^M overflows or squaring loses everything


def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def matrix_exp(M: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a [13/13] Pade approximant."""
    A = np.asarray(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise SpecError(f"matrix_exp needs a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise SpecError("matrix_exp input has non-finite entries")
    n = A.shape[0]
    norm1 = float(np.max(np.sum(np.abs(A), axis=0))) if n else 0.0
    if norm1 > _MAX_NORM:
        raise NumericalError(f"matrix_exp: norm {norm1:.3g} too large, result would overflow")
    if norm1 == 0.0:
        return np.eye(n)
    s = max(0, int(math.ceil(math.log2(norm1 / _THETA13)))) if norm1 > _THETA13 else 0
    A = A / (2.0**s)
    b = _PADE13
    ident = np.eye(n)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2) + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
    V = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident
    X = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        X = X @ X
    if not np.all(np.isfinite(X)):
        raise NumericalError("matrix_exp overflowed")
    return X


@dataclass(frozen=True)
class CovIntegral:
    """Covariance of int_0^tau e^{-R u} V dW_u, i.e. int_0^tau e^{-Ru} Sigma e^{-R^T u} du."""

    horizon: float
    value: np.ndarray


def integrated_covariance(ou: OUParams, tau: float) -> CovIntegral:
    if tau < 0:
        raise SpecError(f"tau must be non-negative, got {tau}")
    d = ou.d
    if tau == 0:
        return CovIntegral(0.0, np.zeros((d, d)))
    rnorm = float(np.linalg.norm(ou.R, 2))
    panels = max(64, int(math.ceil(256 * tau * rnorm)))
    h = tau / (2 * panels)
    step = matrix_exp(-ou.R * h)
    E = np.eye(d)
    acc = np.zeros((d, d))
    for j in range(2 * panels + 1):
        w = 1.0 if j in (0, 2 * panels) else (4.0 if j % 2 else 2.0)
        acc += w * (E @ ou.Sigma @ E.T)
        E = step @ E
    return CovIntegral(float(tau), sym(acc * h / 3.0))


def psd_leq(Mlow: np.ndarray, Mhigh: np.ndarray, tol: float = 0.0) -> bool:
    """Loewner order test: Mhigh - Mlow has no eigenvalue below -tol."""
    return bool(np.linalg.eigvalsh(sym(np.asarray(Mhigh) - np.asarray(Mlow)))[0] >= -tol)


def sqrtm_psd(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(sym(M))
    return sym((V * np.sqrt(np.clip(w, 0.0, None))) @ V.T)


def inv_sqrtm_pd(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(sym(M))
    if w[0] <= 0:
        raise SpecError("matrix is not positive definite")
    return sym((V / np.sqrt(w)) @ V.T)


def psd_factor(S: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """L with L L^T = S; Cholesky, falling back to an eigenvalue square root."""
    S = sym(S)
    if not np.any(S):
        return np.zeros_like(S)
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(S)
        if w[0] < -rtol * max(abs(w[-1]), abs(w[0])):
            raise NumericalError(f"covariance has negative eigenvalue {w[0]:.3g}")
        return V * np.sqrt(np.clip(w, 0.0, None))
