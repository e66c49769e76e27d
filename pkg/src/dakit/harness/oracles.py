"""Independent oracles: linear toy dynamics, Kalman filter, dense Hessian,
exact dam-break solution."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

MAX_ORACLE_DIM = 100


# -- linear toy model ---------------------------------------------------------

def advection_matrix(n, courant):
    """First-order upwind step for periodic 1D advection, x_i <- (1-c) x_i + c x_{i-1}."""
    if not 0 < courant <= 1:
        raise ValueError("courant number must lie in (0, 1]")
    return (1.0 - courant) * np.eye(n) + courant * np.roll(np.eye(n), 1, axis=0)


class LinearModel:
    """x_{j+1} = M x_j with observations after given numbers of steps.

    Exposes the same forward / states / tlm / adjoint interface as the
    shallow-water model so the 4DVar code runs unchanged.
    """

    def __init__(self, M, obs_steps):
        self.M = np.asarray(M, dtype=float)
        self.obs_steps = list(obs_steps)
        if any(b < a for a, b in zip(self.obs_steps, self.obs_steps[1:])):
            raise ValueError("observation steps must be non-decreasing")

    def propagator(self, steps):
        return np.linalg.matrix_power(self.M, steps)

    def _run(self, x0):
        out, x, done = [], np.asarray(x0, dtype=float), 0
        for s in self.obs_steps:
            for _ in range(s - done):
                x = self.M @ x
            done = s
            out.append(x.copy())
        return out

    def forward(self, x0):
        return self._run(x0)

    def states(self, traj):
        return traj

    def tlm(self, traj, dx0):
        return self._run(dx0)

    def adjoint(self, traj, forcings):
        lam = np.zeros(self.M.shape[0])
        steps = [0] + self.obs_steps
        for k in range(len(self.obs_steps) - 1, -1, -1):
            if forcings[k] is not None:
                lam = lam + forcings[k]
            for _ in range(steps[k + 1] - steps[k]):
                lam = self.M.T @ lam
        return lam


# -- Kalman filter ------------------------------------------------------------

@dataclass
class KalmanStep:
    forecast: np.ndarray
    forecast_cov: np.ndarray
    analysis: np.ndarray
    analysis_cov: np.ndarray
    gain: np.ndarray
    gain_information: np.ndarray  # gain from the information (Woodbury) form


def kalman_gain(P, H, R):
    """K = P H^T (R + H P H^T)^-1."""
    S = R + H @ P @ H.T
    return np.linalg.solve(S.T, H @ P.T).T


def kalman_gain_information(P, H, R):
    """K = (P^-1 + H^T R^-1 H)^-1 H^T R^-1, the Sherman-Morrison-Woodbury form."""
    Rinv_H = np.linalg.solve(R, H)
    A = np.linalg.inv(P) + H.T @ Rinv_H
    return np.linalg.solve(A, Rinv_H.T)


def kalman_oracle(M, H, R, B, xb, observations, obs_steps, check_tol=1e-10):
    """Noise-free-dynamics Kalman filter for x_{j+1} = M x_j.

    observations[k] is assimilated after obs_steps[k] model steps. Both gain
    formulas are evaluated and must agree to check_tol (relative), loosened
    to 100 eps cond(P) when P is ill-conditioned, since the information form
    inverts P.
    Returns a list of KalmanStep, one per observation.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if n > MAX_ORACLE_DIM:
        raise ValueError(f"state dimension {n} exceeds the oracle limit {MAX_ORACLE_DIM}")
    Hs = [np.asarray(H, dtype=float)] * len(observations) if np.ndim(H) == 2 else list(H)
    Rs = [np.asarray(R, dtype=float)] * len(observations) if np.ndim(R) == 2 else list(R)
    x, P = np.asarray(xb, dtype=float).copy(), np.asarray(B, dtype=float).copy()
    done = 0
    out = []
    for y, s, Hk, Rk in zip(observations, obs_steps, Hs, Rs):
        for _ in range(s - done):
            x = M @ x
            P = M @ P @ M.T
        done = s
        S = Rk + Hk @ P @ Hk.T
        if np.linalg.cond(S) > 1e14:
            raise np.linalg.LinAlgError("singular innovation covariance")
        K = kalman_gain(P, Hk, Rk)
        K2 = kalman_gain_information(P, Hk, Rk)
        scale = max(np.abs(K).max(), 1e-300)
        tol = max(check_tol, 100 * np.finfo(float).eps * np.linalg.cond(P))
        if np.abs(K - K2).max() > tol * scale:
            raise AssertionError(f"gain formulas disagree: {np.abs(K - K2).max() / scale:.3e}")
        xa = x + K @ (np.asarray(y, dtype=float) - Hk @ x)
        Pa = (np.eye(n) - K @ Hk) @ P
        out.append(KalmanStep(x, P, xa, Pa, K, K2))
        x, P = xa, 0.5 * (Pa + Pa.T)
    return out


# -- dense Hessian ------------------------------------------------------------

MAX_HESSIAN_DIM = 3 * 8 * 8


def dense_hessian_oracle(inc, sym_tol=1e-10):
    """Hessian of an incremental cost assembled column by column.

    Column j is grad J(e_j) - grad J(0), which is exact for a quadratic cost.
    Raises if the assembled matrix is asymmetric beyond sym_tol (relative).
    """
    n = inc.size
    if n > MAX_HESSIAN_DIM:
        raise ValueError(f"control dimension {n} too large for dense assembly")
    _, g0 = inc.cost_grad(np.zeros(n))[:2]
    Hm = np.column_stack([inc.cost_grad(e)[1] - g0 for e in np.eye(n)])
    asym = np.abs(Hm - Hm.T).max() / np.abs(Hm).max()
    if asym > sym_tol:
        raise AssertionError(f"assembled Hessian asymmetric: {asym:.3e}")
    return Hm


# -- exact dam break ----------------------------------------------------------

def _wave_function(h, hk, g):
    """Velocity jump across a rarefaction (h <= hk) or shock (h > hk)."""
    if h <= hk:
        return 2.0 * (np.sqrt(g * h) - np.sqrt(g * hk))
    return (h - hk) * np.sqrt(0.5 * g * (h + hk) / (h * hk))


def riemann_star(hL, uL, hR, uR, g):
    """Star-region depth and velocity of the wet-bed shallow-water Riemann problem."""
    if 2.0 * (np.sqrt(g * hL) + np.sqrt(g * hR)) <= uR - uL:
        raise ValueError("initial data generate a dry region")

    def f(h):
        return _wave_function(h, hL, g) + _wave_function(h, hR, g) + uR - uL

    hi = max(hL, hR)
    while f(hi) < 0:
        hi *= 2.0
    hs = brentq(f, 1e-14, hi, xtol=1e-15, rtol=1e-15, maxiter=200)
    us = 0.5 * (uL + uR) + 0.5 * (_wave_function(hs, hR, g) - _wave_function(hs, hL, g))
    return hs, us


def exact_riemann(hL, uL, hR, uR, g, xi):
    """Sample the exact solution (h, u) at similarity coordinates xi = x / t."""
    hs, us = riemann_star(hL, uL, hR, uR, g)
    cL, cR, cs = np.sqrt(g * hL), np.sqrt(g * hR), np.sqrt(g * hs)
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    h = np.empty_like(xi)
    u = np.empty_like(xi)
    for i, s in enumerate(xi):
        if s <= us:  # left of contact
            if hs > hL:
                sh = uL - cL * np.sqrt(0.5 * hs * (hs + hL)) / hL
                h[i], u[i] = (hL, uL) if s <= sh else (hs, us)
            else:
                head, tail = uL - cL, us - cs
                if s <= head:
                    h[i], u[i] = hL, uL
                elif s >= tail:
                    h[i], u[i] = hs, us
                else:
                    u[i] = (uL + 2.0 * cL + 2.0 * s) / 3.0
                    c = (uL + 2.0 * cL - s) / 3.0
                    h[i] = c * c / g
        else:
            if hs > hR:
                sh = uR + cR * np.sqrt(0.5 * hs * (hs + hR)) / hR
                h[i], u[i] = (hs, us) if s <= sh else (hR, uR)
            else:
                head, tail = uR + cR, us + cs
                if s >= head:
                    h[i], u[i] = hR, uR
                elif s <= tail:
                    h[i], u[i] = hs, us
                else:
                    u[i] = (uR - 2.0 * cR + 2.0 * s) / 3.0
                    c = (-uR + 2.0 * cR + s) / 3.0
                    h[i] = c * c / g
    return h, u
