"""Discrete tangent-linear and adjoint models of the shallow-water step.

Both are hand-derived from the coded scheme: the tangent applies the flux
Jacobians of every interface, the adjoint applies their transposes in
reverse order. Upwind and entropy-fix branches are frozen at the
checkpoint state.

Setting DAKIT_NO_ADJOINT=1 disables this module; the ensemble method must
run without it.
"""
from __future__ import annotations

import os

import numpy as np

from .swe import (
    StateField,
    _from_frame,
    _pad_along,
    _sweep_frame,
    linearize_step,
)

if os.environ.get("DAKIT_NO_ADJOINT"):
    raise ImportError("dakit.linearized is disabled by DAKIT_NO_ADJOINT")


def _apply_jac(J, d):
    return np.einsum("ij...,j...->i...", J, d)


def _apply_jac_t(J, d):
    return np.einsum("ji...,j...->i...", J, d)


def _sweep_tl(dU, jac, coef, axis):
    JL, JR = jac
    dq = _sweep_frame(dU, axis)
    dp = _pad_along(dq)
    dF = _apply_jac(JL, dp[:, :-1]) + _apply_jac(JR, dp[:, 1:])
    return _from_frame(dq - coef * (dF[:, 1:] - dF[:, :-1]), axis)


def _sweep_ad(lam, jac, coef, axis):
    JL, JR = jac
    lq = _sweep_frame(lam, axis)
    n = lq.shape[1]
    lF = np.zeros((3, n + 1) + lq.shape[2:])
    lF[:, 1:] -= coef * lq
    lF[:, :-1] += coef * lq
    lp = np.zeros((3, n + 2) + lq.shape[2:])
    lp[:, :-1] += _apply_jac_t(JL, lF)
    lp[:, 1:] += _apply_jac_t(JR, lF)
    out = lq + lp[:, 1:-1]
    # ghost cells are (h, -m, t) copies of the first and last interior cells
    sign = np.array([1.0, -1.0, 1.0]).reshape((3, 1))
    out[:, 0] += sign * lp[:, 0]
    out[:, -1] += sign * lp[:, -1]
    return _from_frame(out, axis)


def _as_array(x):
    return x.as_array() if isinstance(x, StateField) else np.asarray(x, dtype=float)


def _check_shapes(checkpoint, d):
    if checkpoint.shape != d.shape:
        raise ValueError(f"checkpoint shape {checkpoint.shape} does not match {d.shape}")


def _tl_array(lin, dU, grid, dt):
    d1 = _sweep_tl(dU, lin.jac_x, dt / grid.dx, 0)
    return _sweep_tl(d1, lin.jac_y, dt / grid.dy, 1)


def _ad_array(lin, lam, grid, dt):
    l1 = _sweep_ad(lam, lin.jac_y, dt / grid.dy, 1)
    return _sweep_ad(l1, lin.jac_x, dt / grid.dx, 0)


def tlm_step(checkpoint, dstate, grid, dt, lin=None):
    """Tangent-linear model of one step about the pre-step state `checkpoint`."""
    U = _as_array(checkpoint)
    dU = _as_array(dstate)
    _check_shapes(U, dU)
    if lin is None:
        lin = linearize_step(U, grid, dt)
    return StateField.from_array(_tl_array(lin, dU, grid, dt))


def adjoint_step(checkpoint, lam, grid, dt, lin=None):
    """Transpose of tlm_step under the unweighted Euclidean inner product."""
    U = _as_array(checkpoint)
    L = _as_array(lam)
    _check_shapes(U, L)
    if lin is None:
        lin = linearize_step(U, grid, dt)
    return StateField.from_array(_ad_array(lin, L, grid, dt))


def _steps_until(traj, t):
    if t < traj.t0 - 1e-12 or t > traj.tf + 1e-12:
        raise ValueError(f"t={t} lies outside the trajectory span [{traj.t0}, {traj.tf}]")
    return traj.record_steps[traj.index_of(t)]


def tlm_sweep(traj, d0, t=None):
    """Propagate the perturbation d0 from t0 to t (default: final time)."""
    t = traj.tf if t is None else t
    n = _steps_until(traj, t)
    d = _as_array(d0).copy()
    for k in range(n):
        cp = traj.step_checkpoints[k]
        d = _tl_array(traj.linearization(k), d, traj.grid, cp.dt)
    return StateField.from_array(d)


def tlm_records(traj, d0):
    """Tangent perturbation at every record time of the trajectory."""
    d = _as_array(d0).copy()
    out = []
    k = 0
    for n in traj.record_steps:
        while k < n:
            cp = traj.step_checkpoints[k]
            d = _tl_array(traj.linearization(k), d, traj.grid, cp.dt)
            k += 1
        out.append(StateField.from_array(d))
    return out


def adjoint_sweep(traj, forcings):
    """Backward adjoint integration from a zero terminal condition.

    forcings is a list of (time, AdjointState) pairs in increasing time order;
    each is added to the adjoint variable when the sweep reaches its time.
    Returns the adjoint variable at t0.
    """
    times = [float(t) for t, _ in forcings]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("forcing times must be in non-decreasing order")
    inject = {}
    for t, f in forcings:
        n = _steps_until(traj, t)
        inject[n] = inject.get(n, 0.0) + _as_array(f)
    lam = np.zeros((3,) + traj.grid.shape)
    n_total = len(traj.step_checkpoints)
    for k in range(n_total, 0, -1):
        if k in inject:
            lam = lam + inject[k]
        cp = traj.step_checkpoints[k - 1]
        lam = _ad_array(traj.linearization(k - 1), lam, traj.grid, cp.dt)
    if 0 in inject:
        lam = lam + inject[0]
    return StateField.from_array(lam)


# -- correctness checks -------------------------------------------------------

def _random_field(shape, gen, scale):
    return gen.standard_normal((3,) + tuple(shape)) * np.reshape(scale, (3, 1, 1))


def dot_product_step(checkpoint, grid, dt, rng=0):
    """Relative residual of <M d, y> = <d, M^T y> for one step, random d and y."""
    gen = np.random.default_rng(rng)
    U = _as_array(checkpoint)
    d = gen.standard_normal(U.shape)
    y = gen.standard_normal(U.shape)
    lin = linearize_step(U, grid, dt)
    lhs = float(np.sum(tlm_step(U, d, grid, dt, lin).as_array() * y))
    rhs = float(np.sum(d * adjoint_step(U, y, grid, dt, lin).as_array()))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs))


def dot_product_window(traj, rng=0):
    """Same identity for the composition of every substep of the trajectory."""
    gen = np.random.default_rng(rng)
    shape = traj.states[0].as_array().shape
    d = gen.standard_normal(shape)
    y = gen.standard_normal(shape)
    lhs = float(np.sum(tlm_sweep(traj, d).as_array() * y))
    rhs = float(np.sum(d * adjoint_sweep(traj, [(traj.tf, StateField.from_array(y))]).as_array()))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs))


def taylor_test(state0, grid, t0, tf, d0, epsilons, dt):
    """Rows (eps, ||X(x + eps d) - X(x) - eps M d|| / ||eps M d||) at tf.

    A correct tangent gives residuals decreasing linearly in eps until
    round-off takes over.
    """
    from .swe import integrate

    base = integrate(state0, grid, t0, tf, dt=dt)
    md = tlm_sweep(base, d0).as_array()
    x_end = base.states[-1].as_array()
    rows = []
    for eps in epsilons:
        pert = integrate(state0 + StateField.from_array(eps * _as_array(d0)), grid, t0, tf, dt=dt)
        r = np.linalg.norm(pert.states[-1].as_array() - x_end - eps * md) / np.linalg.norm(eps * md)
        rows.append((float(eps), float(r)))
    return rows
