"""Backward solver for the coefficient ODEs of the quadratic value-function ansatz.

The value function is w(t, x, q, S) = -exp(-gamma (x + q.S + theta(t, q, S)))
with theta(t, q, S) = q'Aq + q'BS + S'CS + D'q + E'S + F. The (A, B, C) block
obeys the matrix Riccati equation P' = Q + Y'P + PY + PUP for the symmetric
2d x 2d matrix P = [[A, B/2], [B'/2, C]], integrated backward from
P(T) = diag(-Gamma, 0).

Two schemes are provided:

``"hamiltonian"`` (default)
    Each grid interval is propagated with the exact flow of the Riccati
    equation, obtained from the linear Hamiltonian system [M; N]' = H [M; N]
    with P = N M^{-1}. D and E follow from the translation identities
    D = -B Sbar, E = -2 C Sbar, and F from a trapezoidal integral.
``"implicit_euler"``
    First-order implicit Euler with a damped Newton inner solve and local
    step halving, (D, E) by a linear implicit step and F by the trapezoid rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import matrix_balance

from .matrix_kit import integrated_covariance, matrix_exp, sym
from .model import ExecutionSpec, NumericalError, OUParams, SpecError, TimeGrid, validate_spec

SCHEMES = ("hamiltonian", "implicit_euler")


@dataclass(frozen=True)
class ODEState:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    F: float

    @classmethod
    def terminal(cls, ex: ExecutionSpec) -> "ODEState":
        d = ex.d
        z = np.zeros((d, d))
        return cls(-ex.Gamma.copy(), z.copy(), z.copy(), np.zeros(d), np.zeros(d), 0.0)

    @property
    def P(self) -> np.ndarray:
        return assemble_P(self.A, self.B, self.C)

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.A.ravel(), self.B.ravel(), self.C.ravel(), self.D, self.E, [self.F]]
        )


def assemble_P(A: np.ndarray, B: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.block([[A, 0.5 * B], [0.5 * B.T, C]])


def split_P(P: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d = P.shape[-1] // 2
    return P[..., :d, :d], P[..., :d, d:] + np.swapaxes(P[..., d:, :d], -1, -2), P[..., d:, d:]


def riccati_coefficients(ou: OUParams, ex: ExecutionSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The constant matrices (Q, Y, U) of the compact Riccati form."""
    d = ou.d
    g, R, Sig = ex.gamma, ou.R, ou.Sigma
    z = np.zeros((d, d))
    Q = 0.5 * np.block([[g * Sig, R], [R.T, z]])
    Y = np.block([[z, z], [g * Sig, R]])
    U = np.block([[-ex.eta_inv, z], [z, 2.0 * g * Sig]])
    return Q, Y, U


def ode_rhs(t: float, s: ODEState, ou: OUParams, ex: ExecutionSpec) -> ODEState:
    """Time derivatives of (A, B, C, D, E, F), written term by term."""
    g, R, Sig, Sb = ex.gamma, ou.R, ou.Sigma, ou.Sbar
    ei = ex.eta_inv
    BI = s.B + np.eye(ou.d)
    dA = 0.5 * g * BI @ Sig @ BI.T - s.A @ ei @ s.A
    dB = BI @ R + 2.0 * g * BI @ Sig @ s.C - s.A @ ei @ s.B
    dC = R.T @ s.C + s.C @ R + 2.0 * g * s.C @ Sig @ s.C - 0.25 * s.B.T @ ei @ s.B
    dD = -BI @ R @ Sb + g * BI @ Sig @ s.E - s.A @ ei @ s.D
    dE = -2.0 * s.C @ R @ Sb + R.T @ s.E + 2.0 * g * s.C @ Sig @ s.E - 0.5 * s.B.T @ ei @ s.D
    dF = (
        -Sb @ R.T @ s.E
        - np.trace(Sig @ s.C)
        + 0.5 * g * s.E @ Sig @ s.E
        - 0.25 * s.D @ ei @ s.D
    )
    return ODEState(sym(dA), dB, sym(dC), dD, dE, float(dF))


def compact_rhs(P: np.ndarray, ou: OUParams, ex: ExecutionSpec, coeffs=None) -> np.ndarray:
    Q, Y, U = coeffs if coeffs is not None else riccati_coefficients(ou, ex)
    return sym(Q + Y.T @ P + P @ Y + P @ U @ P)


@dataclass(frozen=True)
class RiccatiSolution:
    """Coefficients on a uniform grid; index k corresponds to grid.times[k]."""

    grid: TimeGrid
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    F: np.ndarray
    bounds_ok: bool | None = None
    bounds_margin: float = float("nan")
    scheme: str = "hamiltonian"
    notes: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        for name in ("A", "B", "C", "D", "E", "F"):
            getattr(self, name).setflags(write=False)

    @property
    def d(self) -> int:
        return self.A.shape[-1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def P(self) -> np.ndarray:
        """Stacked (N+1, 2d, 2d) array of the symmetric block matrices."""
        return np.stack([assemble_P(a, b, c) for a, b, c in zip(self.A, self.B, self.C)])

    def state(self, k: int) -> ODEState:
        return ODEState(self.A[k], self.B[k], self.C[k], self.D[k], self.E[k], float(self.F[k]))

    @property
    def states(self) -> list[ODEState]:
        return [self.state(k) for k in range(self.grid.N + 1)]

    def _locate(self, t: float) -> tuple[int, float]:
        T, N = self.grid.T, self.grid.N
        eps = 1e-12 * max(1.0, T)
        if not (-eps <= t <= T + eps):
            raise ValueError(f"t={t} outside [0, {T}]")
        x = min(max(t, 0.0), T) / T * N
        k = min(int(math.floor(x)), N - 1)
        return k, x - k

    def state_at(self, t: float) -> ODEState:
        """Componentwise linear interpolation between grid nodes."""
        k, w = self._locate(t)
        if w == 0.0:
            return self.state(k)

        def lerp(a):
            return (1.0 - w) * a[k] + w * a[k + 1]

        return ODEState(lerp(self.A), lerp(self.B), lerp(self.C), lerp(self.D), lerp(self.E), float(lerp(self.F)))

    def with_bounds(self, ok: bool | None, margin: float, notes: tuple[str, ...] = ()) -> "RiccatiSolution":
        return RiccatiSolution(
            self.grid, self.A, self.B, self.C, self.D, self.E, self.F,
            ok, margin, self.scheme, self.notes + notes,
        )


def _from_P_stack(P: np.ndarray, ou: OUParams, ex: ExecutionSpec, grid: TimeGrid, scheme: str) -> RiccatiSolution:
    A, B, C = split_P(P)
    A = sym_stack(A)
    C = sym_stack(C)
    Sb = ou.Sbar
    D = -B @ Sb
    E = -2.0 * C @ Sb
    # F(t) = Sbar'C(t)Sbar + int_t^T tr(Sigma C(s)) ds
    tr = np.einsum("ij,kji->k", ou.Sigma, C)
    h = grid.dt
    tail = np.zeros(grid.N + 1)
    tail[:-1] = np.cumsum((0.5 * h * (tr[:-1] + tr[1:]))[::-1])[::-1]
    F = np.einsum("i,kij,j->k", Sb, C, Sb) + tail
    return RiccatiSolution(grid, A, B, C, D, E, F, scheme=scheme)


def sym_stack(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _hamiltonian_sweep(ou: OUParams, ex: ExecutionSpec, grid: TimeGrid) -> np.ndarray:
    Q, Y, U = riccati_coefficients(ou, ex)
    n = Q.shape[0]
    H = np.block([[-Y, -U], [Q, Y.T]])
    h = grid.dt
    rho = float(np.max(np.abs(np.linalg.eigvals(H)))) if n else 0.0
    m = max(1, int(math.ceil(h * rho)))
    # diagonal balancing keeps the Pade approximant accurate when eta and Sigma
    # live on very different scales
    _, (scale, _) = matrix_balance(-H * (h / m), permute=False, separate=True)
    Hb = (-H * (h / m)) * (1.0 / scale)[:, None] * scale[None, :]
    Phi = matrix_exp(Hb) * scale[:, None] * (1.0 / scale)[None, :]
    P11, P12 = Phi[:n, :n], Phi[:n, n:]
    P21, P22 = Phi[n:, :n], Phi[n:, n:]
    out = np.empty((grid.N + 1, n, n))
    P = assemble_P(-ex.Gamma, np.zeros((ou.d, ou.d)), np.zeros((ou.d, ou.d)))
    out[-1] = P
    for k in range(grid.N - 1, -1, -1):
        for _ in range(m):
            M = P11 + P12 @ P
            Nm = P21 + P22 @ P
            P = sym(np.linalg.solve(M.T, Nm.T).T)
        if not np.all(np.isfinite(P)):
            raise NumericalError(f"Riccati flow blew up at step {k} (t={grid.times[k]:.6g})")
        out[k] = P
    out[-1] = assemble_P(-ex.Gamma, np.zeros((ou.d, ou.d)), np.zeros((ou.d, ou.d)))
    return out


def _implicit_euler_sweep(ou: OUParams, ex: ExecutionSpec, grid: TimeGrid, tol: float = 1e-12,
                          max_iter: int = 200, max_halvings: int = 10) -> RiccatiSolution:
    coeffs = riccati_coefficients(ou, ex)
    d = ou.d
    g, R, Sig, Sb = ex.gamma, ou.R, ou.Sigma, ou.Sbar
    ei = ex.eta_inv
    I = np.eye(d)
    N = grid.N
    Ps = np.empty((N + 1, 2 * d, 2 * d))
    Ds = np.empty((N + 1, d))
    Es = np.empty((N + 1, d))
    Fs = np.empty(N + 1)
    P = assemble_P(-ex.Gamma, np.zeros((d, d)), np.zeros((d, d)))
    x = np.zeros(2 * d)
    F = 0.0
    Ps[N], Ds[N], Es[N], Fs[N] = P, 0.0, 0.0, 0.0

    def f(P):
        return compact_rhs(P, ou, ex, coeffs)

    def de_system(P):
        A, B, C = split_P(P)
        BI = B + I
        M = np.block([[-A @ ei, g * BI @ Sig], [-0.5 * B.T @ ei, R.T + 2.0 * g * C @ Sig]])
        c = np.concatenate([-BI @ R @ Sb, -2.0 * C @ R @ Sb])
        return M, c

    def dF(P, x):
        _, _, C = split_P(P)
        D, E = x[:d], x[d:]
        return -Sb @ R.T @ E - np.trace(Sig @ C) + 0.5 * g * E @ Sig @ E - 0.25 * D @ ei @ D

    Q, Y, U = coeffs
    n = 2 * d
    In = np.eye(n)

    def implicit_step(Pn, h):
        """Solve G(P) = P + h f(P) - Pn = 0 by damped Newton; returns (P, converged, residual).

        The Jacobian dG = dP + h (Y'dP + dP Y + dP U P + P U dP) is applied in
        row-major vec form: vec(X M) = (I kron M') vec(X), vec(M X) = (M kron I) vec(X).
        """
        scale = max(1.0, float(np.max(np.abs(Pn))))
        P = Pn.copy()
        G = h * f(P)
        res = float(np.max(np.abs(G)))
        change = np.inf
        for _ in range(max_iter):
            if res <= tol * scale:
                return P, True, res
            L = Y.T + P @ U
            Rt = Y + U @ P
            J = np.eye(n * n) + h * (np.kron(L, In) + np.kron(In, Rt.T))
            step = np.linalg.solve(J, -G.ravel()).reshape(n, n)
            change = float(np.max(np.abs(step)))
            omega = 1.0
            for _ in range(30):
                trial = sym(P + omega * step)
                Gt = trial + h * f(trial) - Pn
                rt = float(np.max(np.abs(Gt)))
                if np.isfinite(rt) and rt < res or omega * change <= tol * scale:
                    break
                omega *= 0.5
            P, G, res = trial, Gt, rt
            if omega * change <= tol * scale:
                return P, np.isfinite(res), res
        return P, False, res

    for k in range(N - 1, -1, -1):
        h_total = grid.dt
        for halving in range(max_halvings + 1):
            m = 2 ** halving
            h = h_total / m
            Pc, xc, Fc = P, x, F
            ok = True
            resid = 0.0
            for _ in range(m):
                Pn, conv, resid = implicit_step(Pc, h)
                if not conv:
                    ok = False
                    break
                M, c = de_system(Pn)
                xn = np.linalg.solve(np.eye(2 * d) + h * M, xc - h * c)
                Fc = Fc - 0.5 * h * (dF(Pn, xn) + dF(Pc, xc))
                Pc, xc = Pn, xn
            if ok:
                break
        else:
            raise NumericalError(
                f"implicit Euler inner solve failed at step {k} (t={grid.times[k]:.6g}), residual {resid:.3g}"
            )
        P, x, F = Pc, xc, Fc
        Ps[k], Ds[k], Es[k], Fs[k] = P, x[:d], x[d:], F

    A, B, C = split_P(Ps)
    return RiccatiSolution(grid, sym_stack(A), B.copy(), sym_stack(C), Ds, Es, Fs, scheme="implicit_euler")


def solve_backward(ou: OUParams, ex: ExecutionSpec, grid: TimeGrid, scheme: str = "hamiltonian",
                   check: bool = True, bound_rtol: float = 1e-6) -> RiccatiSolution:
    """Integrate the coefficient ODEs from T back to 0 on ``grid``.

    The returned solution carries a bounds certificate from :func:`check_bounds`
    (``None`` when Sigma is singular and R is nonzero, since the upper bound is
    then undefined).
    """
    problems = validate_spec(ou, ex)
    if problems:
        raise SpecError("; ".join(problems))
    if abs(grid.T - ex.T) > 1e-12 * max(1.0, ex.T):
        raise SpecError(f"grid horizon {grid.T} differs from execution horizon {ex.T}")
    if scheme == "hamiltonian":
        sol = _from_P_stack(_hamiltonian_sweep(ou, ex, grid), ou, ex, grid, scheme)
    elif scheme == "implicit_euler":
        sol = _implicit_euler_sweep(ou, ex, grid)
    else:
        raise SpecError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if not check:
        return sol
    try:
        ok, margin = check_bounds(sol, ou, ex, rtol=bound_rtol)
    except SpecError as err:
        return sol.with_bounds(None, float("nan"), (str(err),))
    return sol.with_bounds(ok, margin)


def solve_rk4(ou: OUParams, ex: ExecutionSpec, grid: TimeGrid, refine: int = 10) -> RiccatiSolution:
    """Classical RK4 on the full six-equation system, ``refine`` substeps per grid interval.

    Reference integrator for accuracy checks; not used on the production path.
    """
    s = ODEState.terminal(ex)
    h = -grid.dt / refine
    t = grid.T
    N = grid.N
    keep = [s]

    def add(a: ODEState, b: ODEState, c: float) -> ODEState:
        return ODEState(a.A + c * b.A, a.B + c * b.B, a.C + c * b.C, a.D + c * b.D, a.E + c * b.E, a.F + c * b.F)

    for _ in range(N):
        for _ in range(refine):
            k1 = ode_rhs(t, s, ou, ex)
            k2 = ode_rhs(t + h / 2, add(s, k1, h / 2), ou, ex)
            k3 = ode_rhs(t + h / 2, add(s, k2, h / 2), ou, ex)
            k4 = ode_rhs(t + h, add(s, k3, h), ou, ex)
            inc = add(add(add(k1, k2, 2.0), k3, 2.0), k4, 1.0)
            s = add(s, inc, h / 6)
            t += h
        keep.append(s)
    keep.reverse()
    arr = {n: np.array([getattr(st, n) for st in keep]) for n in ("A", "B", "C", "D", "E", "F")}
    return RiccatiSolution(grid, sym_stack(arr["A"]), arr["B"], sym_stack(arr["C"]), arr["D"], arr["E"],
                           arr["F"], scheme="rk4")


def sandwich_bounds(ou: OUParams, ex: ExecutionSpec, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Lower (hold strategy) and upper (frictionless Merton) envelopes of P on the grid."""
    d = ou.d
    N = grid.N
    g = ex.gamma
    try:
        Sinv = np.linalg.inv(ou.Sigma)
        if not np.all(np.isfinite(Sinv)) or np.linalg.cond(ou.Sigma) > 1e14:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        if np.any(ou.R):
            raise SpecError("upper bound requires invertible Sigma") from None
        Sinv = np.zeros((d, d))
    MR = sym(ou.R.T @ Sinv @ ou.R)
    h = grid.dt
    Eh = matrix_exp(-ou.R * h)
    Sh = integrated_covariance(ou, h).value
    lower = np.zeros((N + 1, 2 * d, 2 * d))
    upper = np.zeros((N + 1, 2 * d, 2 * d))
    Etau = np.eye(d)
    Stau = np.zeros((d, d))
    I = np.eye(d)
    for k in range(N, -1, -1):
        tau = (N - k) * h
        off = -0.5 * (I - Etau)
        lower[k] = np.block([[-0.5 * g * Stau - ex.Gamma, off], [off.T, np.zeros((d, d))]])
        upper[k, d:, d:] = tau / (2.0 * g) * MR
        Stau = sym(Sh + Eh @ Stau @ Eh.T)
        Etau = Eh @ Etau
    return lower, upper


def check_bounds(sol: RiccatiSolution, ou: OUParams, ex: ExecutionSpec, tol: float | None = None,
                 rtol: float = 1e-6) -> tuple[bool, float]:
    """Verify lower(t) <= P(t) <= upper(t) in the Loewner order at every node.

    The per-node tolerance is ``tol`` when given, else ``rtol`` times the largest
    spectral radius among P(t) and its two bounds. Returns (ok, most negative
    eigenvalue seen across both differences).
    """
    lower, upper = sandwich_bounds(ou, ex, sol.grid)
    P = sol.P
    lo_gap = np.linalg.eigvalsh(sym_stack(P - lower))[:, 0]
    hi_gap = np.linalg.eigvalsh(sym_stack(upper - P))[:, 0]
    if tol is None:
        rad = np.max(np.stack([
            np.max(np.abs(np.linalg.eigvalsh(P)), axis=1),
            np.max(np.abs(np.linalg.eigvalsh(lower)), axis=1),
            np.max(np.abs(np.linalg.eigvalsh(upper)), axis=1),
        ]), axis=0)
        tols = rtol * rad
    else:
        tols = np.full(P.shape[0], tol)
    ok = bool(np.all(lo_gap >= -tols) and np.all(hi_gap >= -tols))
    return ok, float(min(lo_gap.min(), hi_gap.min()))


def theta_eval(sol: RiccatiSolution, t: float, q, S) -> float:
    s = sol.state_at(t)
    q = np.asarray(q, dtype=float)
    S = np.asarray(S, dtype=float)
    return float(q @ s.A @ q + q @ s.B @ S + S @ s.C @ S + s.D @ q + s.E @ S + s.F)


def value_function(sol: RiccatiSolution, t: float, x: float, q, S, ex: ExecutionSpec) -> float:
    q = np.asarray(q, dtype=float)
    S = np.asarray(S, dtype=float)
    expo = -ex.gamma * (x + q @ S + theta_eval(sol, t, q, S))
    if not np.isfinite(expo) or abs(expo) > 700.0:
        raise NumericalError(f"value function exponent {expo:.6g} outside [-700, 700]")
    return -math.exp(expo)
