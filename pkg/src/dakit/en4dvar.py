"""Ensemble 4DVar.

The background covariance square root is the matrix of ensemble anomalies
propagated by the nonlinear model, optionally localized by a truncated
spectral square root of a compact correlation matrix. Cost and gradient
need no tangent-linear or adjoint model. Ensembles are cycled between
windows with a perturbed-observation EnKF or an ETKF.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .observations import SWEObservationOperator
from .optimize import conjugate_gradient
from .stochastics import SeededRng
from .swe import StateField, integrate

log = logging.getLogger(__name__)

DEFAULT_ENERGY = 0.99


def _matrix(members):
    """(n, N) matrix whose columns are the flattened members."""
    if isinstance(members, np.ndarray):
        return np.asarray(members, dtype=float)
    return np.column_stack([m.to_vector() for m in members])


def anomalies(members):
    """Centered anomalies scaled by 1/sqrt(N-1), shaped (n, N)."""
    X = _matrix(members)
    N = X.shape[1]
    if N < 2:
        raise ValueError("anomalies need at least 2 members")
    return (X - X.mean(axis=1, keepdims=True)) / np.sqrt(N - 1)


def covariance_apply(Xp, v):
    """B v = X'(X'^T v) without forming B."""
    return Xp @ (Xp.T @ v)


def _integrate_member(args):
    state, grid, t0, tf, record_times, dt = args
    return integrate(state, grid, t0, tf, record_times=record_times, dt=dt)


def propagate_ensemble(members, grid, t0, tf, record_times, dt, workers=1):
    """Integrate each member independently; returns one Trajectory per member."""
    jobs = [(m, grid, t0, tf, record_times, dt) for m in members]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_integrate_member, jobs))
    return [_integrate_member(j) for j in jobs]


# -- localization -------------------------------------------------------------

def gaspari_cohn(r):
    """Fifth-order piecewise rational function of r = d / c, zero for r >= 2."""
    r = np.abs(np.asarray(r, dtype=float))
    out = np.zeros_like(r)
    a = r <= 1
    b = (r > 1) & (r < 2)
    ra = r[a]
    out[a] = -0.25 * ra**5 + 0.5 * ra**4 + 0.625 * ra**3 - 5.0 / 3.0 * ra**2 + 1.0
    rb = r[b]
    out[b] = (rb**5 / 12.0 - 0.5 * rb**4 + 0.625 * rb**3 + 5.0 / 3.0 * rb**2
              - 5.0 * rb + 4.0 - 2.0 / (3.0 * rb))
    return out


def correlation_value(d, kind, L):
    """Correlation at distance d for cutoff L; zero beyond 2L for both families."""
    if L <= 0:
        raise ValueError("cutoff must be positive")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    if kind == "gaussian":
        out = np.where(d < 2 * L, np.exp(-d * d / (2 * L * L)), 0.0)
    elif kind in ("compact-polynomial", "gaspari-cohn", "gc"):
        out = gaspari_cohn(d / L)
    else:
        raise ValueError(f"unknown correlation family {kind!r}")
    return float(out) if out.ndim == 0 else out


@dataclass
class LocalizationBasis:
    kind: str
    cutoff: float
    modes: np.ndarray  # (n, r), columns scaled by sqrt(eigenvalue)
    eigenvalues: np.ndarray  # retained, non-increasing
    retained_energy: float
    clipped: int = 0  # number of negative eigenvalues set to zero

    @property
    def rank(self):
        return self.modes.shape[1]

    def correlation(self):
        """C' C'^T."""
        return self.modes @ self.modes.T


def build_localization(grid, kind, L, r=None, energy=DEFAULT_ENERGY):
    """Truncated spectral square root C' = E_r Lambda_r^{1/2} of the correlation matrix.

    Keeps r leading modes if r is given, otherwise the smallest r whose
    eigenvalues reach the requested energy fraction.
    """
    pts = grid.points()
    C = correlation_value(cdist(pts, pts), kind, L)
    lam, E = np.linalg.eigh(C)
    lam, E = lam[::-1], E[:, ::-1]
    clipped = int(np.sum(lam < 0))
    if clipped:
        log.info("clipping %d negative correlation eigenvalues (min %.3g)", clipped, lam.min())
    lam = np.clip(lam, 0.0, None)
    total = lam.sum()
    if r is None:
        frac = np.cumsum(lam) / total
        r = int(np.searchsorted(frac, energy - 1e-12) + 1)
    n = len(lam)
    if not 1 <= r <= n:
        raise ValueError(f"number of modes must lie in [1, {n}]")
    lam_r = lam[:r]
    modes = E[:, :r] * np.sqrt(lam_r)
    return LocalizationBasis(kind, L, modes, lam_r, float(lam_r.sum() / total), clipped)


# -- square-root operators ----------------------------------------------------

class SqrtB:
    """Square root of the (localized) ensemble covariance at one time.

    Unlocalized: S v = X' v with v of length N.
    Localized: S v = sum_k diag(x'_k) C'' v_k, v = (v_1..v_N) each of length r,
    where C'' stacks C' once per state component.
    """

    def __init__(self, perturbations, localization=None, n_components=3):
        self.X = np.asarray(perturbations, dtype=float)
        self.loc = localization
        self.nc = n_components
        self.N = self.X.shape[1]

    @property
    def size(self):
        return self.N if self.loc is None else self.N * self.loc.rank

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        if v.size != self.size:
            raise ValueError(f"control vector has length {v.size}, expected {self.size}")
        if self.loc is None:
            return self.X @ v
        V = v.reshape(self.N, self.loc.rank)
        CV = np.tile(self.loc.modes @ V.T, (self.nc, 1))  # (n, N)
        return np.einsum("ik,ik->i", self.X, CV)

    def apply_transpose(self, w):
        w = np.asarray(w, dtype=float)
        if self.loc is None:
            return self.X.T @ w
        W = (self.X * w[:, None]).reshape(self.nc, -1, self.N).sum(axis=0)
        return (self.loc.modes.T @ W).T.ravel()

    def dense(self):
        return np.column_stack([self.apply(e) for e in np.eye(self.size)])


def sqrtB_at(t, member_trajs, localization=None):
    """Flow-dependent square root from the member states recorded at time t."""
    try:
        states = [tr.state_at(t) for tr in member_trajs]
    except KeyError:
        raise KeyError(f"time {t} is not recorded in the member trajectories") from None
    return SqrtB(anomalies(states), localization)


# -- cost function ------------------------------------------------------------

class EnsembleProblem:
    """Quadratic En4DVar cost in the ensemble control space.

    xs: outer-state vectors at the observation times; sqrts: SqrtB per
    observation time; obs: observation operator with tl / ad linearized at xs.
    """

    def __init__(self, xs, sqrts, obs):
        self.xs = xs
        self.sqrts = sqrts
        self.obs = obs
        self.innovations = [obs.values(k) - obs.predict(k, x) for k, x in enumerate(xs)]
        self.size = sqrts[0].size

    def _rinv(self, k, y):
        return y / self.obs.variances(k)

    def _forward(self, dz):
        return [self.obs.tl(k, self.xs[k], S.apply(dz)) for k, S in enumerate(self.sqrts)]

    def _backward(self, ys):
        return sum(S.apply_transpose(self.obs.ad(k, self.xs[k], y))
                   for k, (S, y) in enumerate(zip(self.sqrts, ys)))

    def cost_grad(self, dz):
        dz = np.asarray(dz, dtype=float)
        if dz.size != self.size:
            raise ValueError(f"control vector has length {dz.size}, expected {self.size}")
        res = [hd - d for hd, d in zip(self._forward(dz), self.innovations)]
        J = 0.5 * float(dz @ dz) + 0.5 * sum(float(r @ self._rinv(k, r)) for k, r in enumerate(res))
        g = dz + self._backward([self._rinv(k, r) for k, r in enumerate(res)])
        return J, g

    def hessvec(self, v):
        return v + self._backward([self._rinv(k, y) for k, y in enumerate(self._forward(v))])

    @property
    def rhs(self):
        return self._backward([self._rinv(k, d) for k, d in enumerate(self.innovations)])


def cost_grad_en(dz, problem):
    return problem.cost_grad(dz)


def analysis_increment(dz, sqrt0):
    """State-space increment S(t0) dz."""
    return sqrt0.apply(dz)


# -- ensemble updates ---------------------------------------------------------

def _obs_anomalies(HX):
    HX = np.asarray(HX, dtype=float)
    return HX - HX.mean(axis=1, keepdims=True)


def etkf_update(Xf, HXf, y, r_var):
    """Ensemble transform Kalman filter analysis.

    Xf (n, N) forecast members, HXf (m, N) their predicted observations.
    With raw anomalies A and Y = H A, the weights are
    w = M^-1 Y^T R^-1 (y - mean HX) with M = (N-1) I + Y^T R^-1 Y, and the
    analysis anomalies are sqrt(N-1) A M^{-1/2} (symmetric root).
    Returns the analysis members (n, N).
    """
    Xf = np.asarray(Xf, dtype=float)
    N = Xf.shape[1]
    if N < 2:
        raise ValueError("ETKF needs at least 2 members")
    xm = Xf.mean(axis=1)
    A = Xf - xm[:, None]
    Y = _obs_anomalies(HXf)
    d = np.asarray(y, dtype=float) - np.asarray(HXf).mean(axis=1)
    rinv = 1.0 / np.asarray(r_var, dtype=float)
    M = (N - 1) * np.eye(N) + Y.T @ (Y * rinv[:, None])
    lam, Q = np.linalg.eigh(M)
    w = Q @ ((Q.T @ (Y.T @ (rinv * d))) / lam)
    T = Q @ (Q.T / np.sqrt(lam)[:, None])
    xa = xm + A @ w
    return xa[:, None] + np.sqrt(N - 1) * (A @ T)


def ensemble_gain_apply(Xf, HXf, r_var, v):
    """K v with K = X' Y'^T (Y' Y'^T + R)^-1 from 1/sqrt(N-1)-scaled anomalies.

    Evaluated in ensemble space through the Sherman-Morrison-Woodbury identity.
    """
    Xp = anomalies(Xf)
    Yp = _obs_anomalies(HXf) / np.sqrt(Xp.shape[1] - 1)
    rinv = 1.0 / np.asarray(r_var, dtype=float)
    N = Xp.shape[1]
    inner = np.eye(N) + Yp.T @ (Yp * rinv[:, None])
    return Xp @ np.linalg.solve(inner, Yp.T @ (rinv[:, None] * v if v.ndim == 2 else rinv * v))


def enkf_update_perturbed(Xf, HXf, y, r_var, rng, perturbations=None):
    """Stochastic EnKF: each member assimilates y plus its own N(0, R) draw.

    perturbations (m, N) overrides the random draws. Member i draws from its
    own stream of rng, so results do not depend on evaluation order.
    """
    Xf = np.asarray(Xf, dtype=float)
    HXf = np.asarray(HXf, dtype=float)
    N = Xf.shape[1]
    if N < 2:
        raise ValueError("EnKF needs at least 2 members")
    r_var = np.asarray(r_var, dtype=float)
    if perturbations is None:
        root = rng if isinstance(rng, SeededRng) else SeededRng(int(rng))
        perturbations = np.column_stack([
            root.child(i).generator().standard_normal(len(r_var)) * np.sqrt(r_var)
            for i in range(N)])
    innov = np.asarray(y, dtype=float)[:, None] + perturbations - HXf
    return Xf + ensemble_gain_apply(Xf, HXf, r_var, innov)


def _stacked_obs(obs_op, idx, member_states):
    """Stack predicted observations of all members over several observation times."""
    HX = np.vstack([obs_op.predict_all(k, np.column_stack([s[j] for s in member_states]))
                    for j, k in enumerate(idx)])
    y = np.concatenate([obs_op.values(k) for k in idx])
    r = np.concatenate([obs_op.variances(k) for k in idx])
    return HX, y, r


def etkf_update_members(members, obs, k):
    """ETKF on StateField members with the observations at index k."""
    op = SWEObservationOperator(obs)
    X = _matrix(members)
    Xa = etkf_update(X, op.predict_all(k, X), op.values(k), op.variances(k))
    return [StateField.from_vector(c, members[0].shape) for c in Xa.T]


def enkf_update_members(members, obs, k, rng, perturbations=None):
    op = SWEObservationOperator(obs)
    X = _matrix(members)
    Xa = enkf_update_perturbed(X, op.predict_all(k, X), op.values(k), op.variances(k), rng,
                               perturbations)
    return [StateField.from_vector(c, members[0].shape) for c in Xa.T]


# -- cycling driver -----------------------------------------------------------

@dataclass
class EnVarSettings:
    localization: LocalizationBasis | None = None
    outer_iters: int = 1
    inner_iters: int = 50
    inner_tol: float = 1e-4
    update: str = "enkf"  # or "etkf"
    seed: int = 0
    workers: int = 1


@dataclass
class WindowResult:
    t0: float
    tf: float
    obs_index: list
    analysis: StateField
    trajectory: object
    cost_history: list = field(default_factory=list)
    inner_iterations: list = field(default_factory=list)
    diverged: bool = False


@dataclass
class CycleResult:
    windows: list
    ensemble: list


def _window_analysis(x, members, grid, obs, op, idx, t0, tf, dt, settings):
    times = obs.times[idx]
    record = np.concatenate([[t0], times, [tf]])
    history, iters = [], []
    diverged = False
    central = integrate(x, grid, t0, tf, record_times=record, dt=dt)
    sub = _SubsetOperator(op, idx)
    for it in range(settings.outer_iters):
        trajs = propagate_ensemble(members, grid, t0, tf, record, dt, settings.workers)
        xs = [central.state_at(t).to_vector() for t in times]
        sqrts = [sqrtB_at(t, trajs, settings.localization) for t in times]
        prob = EnsembleProblem(xs, sqrts, sub)
        j0, _ = prob.cost_grad(np.zeros(prob.size))
        if not history:
            history.append(j0)
        sol = conjugate_gradient(prob.hessvec, prob.rhs, max_iter=settings.inner_iters,
                                 tol=settings.inner_tol)
        iters.append(sol.iterations)
        if not np.any(sol.x):
            break
        dx = StateField.from_vector(analysis_increment(sol.x, sqrtB_at(t0, trajs, settings.localization)),
                                    grid.shape)
        x_new = x + dx
        try:
            central_new = integrate(x_new, grid, t0, tf, record_times=record, dt=dt)
        except ValueError as exc:
            log.warning("window [%g, %g] outer %d rejected: %s", t0, tf, it, exc)
            diverged = True
            break
        xs_new = [central_new.state_at(t).to_vector() for t in times]
        jo_new = 0.0
        for k, xv in enumerate(xs_new):
            r = sub.values(k) - sub.predict(k, xv)
            jo_new += 0.5 * float(r @ (r / sub.variances(k)))
        j_new = 0.5 * float(sol.x @ sol.x) + jo_new
        if j_new > j0:
            level = logging.INFO if j_new <= j0 * (1 + 1e-8) else logging.WARNING
            log.log(level, "window [%g, %g] outer %d increased the cost (%.6g -> %.6g)",
                    t0, tf, it, j0, j_new)
            diverged = True
            break
        history.append(j_new)
        x, central = x_new, central_new
        members = [m + dx for m in members]
    return x, central, members, history, iters, diverged


class _SubsetOperator:
    """View of an observation operator restricted to some observation indices."""

    def __init__(self, op, idx):
        self.op, self.idx = op, list(idx)

    def __len__(self):
        return len(self.idx)

    def values(self, k):
        return self.op.values(self.idx[k])

    def variances(self, k):
        return self.op.variances(self.idx[k])

    def predict(self, k, x):
        return self.op.predict(self.idx[k], x)

    def tl(self, k, x, dx):
        return self.op.tl(self.idx[k], x, dx)

    def ad(self, k, x, dy):
        return self.op.ad(self.idx[k], x, dy)

    def predict_all(self, k, X):
        return self.op.predict_all(self.idx[k], X)


def sliding_windows(obs_times, window_len_obs, n_windows):
    """Windows of window_len_obs consecutive observations starting at successive ones."""
    out = []
    for w in range(n_windows):
        idx = list(range(w, w + window_len_obs))
        if idx[-1] >= len(obs_times):
            raise ValueError("not enough observation times for the requested windows")
        out.append((float(obs_times[idx[0]]), float(obs_times[idx[-1]]), idx))
    return out


def run_en4dvar_cycle(background, members, grid, obs, windows, dt, settings=None):
    """Cycle En4DVar over ordered windows.

    windows: list of (t0, tf, observation indices). For each window the
    ensemble is propagated, the quadratic cost minimized by CG, the analysis
    increment added to the outer state and translated onto the members, and
    the ensemble anomalies refreshed with an EnKF/ETKF update using all
    observations of the window (members re-centered on the variational
    analysis). Analysis and ensemble are then forecast to the next window start.
    """
    settings = settings or EnVarSettings()
    op = SWEObservationOperator(obs)
    root = SeededRng(settings.seed)
    x = background.copy()
    members = [m.copy() for m in members]
    results = []
    t_prev = None
    for w, (t0, tf, idx) in enumerate(windows):
        if t_prev is not None and t0 < t_prev:
            raise ValueError("windows must be ordered by start time")
        if t_prev is not None and t0 > t_prev:
            x = integrate(x, grid, t_prev, t0, dt=dt).states[-1]
            members = [tr.states[-1] for tr in propagate_ensemble(
                members, grid, t_prev, t0, [t_prev, t0], dt, settings.workers)]
        t_prev = t0
        xa, central, members, history, iters, diverged = _window_analysis(
            x, members, grid, obs, op, idx, t0, tf, dt, settings)
        results.append(WindowResult(t0, tf, list(idx), xa, central, history, iters, diverged))

        times = obs.times[idx]
        trajs = propagate_ensemble(members, grid, t0, tf, np.concatenate([[t0], times, [tf]]), dt,
                                   settings.workers)
        states = [[tr.state_at(t).to_vector() for t in times] for tr in trajs]
        HX, y, r = _stacked_obs(op, idx, states)
        X = _matrix(members)
        if settings.update == "etkf":
            Xa = etkf_update(X, HX, y, r)
        elif settings.update == "enkf":
            Xa = enkf_update_perturbed(X, HX, y, r, root.child(w))
        else:
            raise ValueError(f"unknown ensemble update {settings.update!r}")
        updated = [StateField.from_vector(c, grid.shape) for c in Xa.T]
        A = np.stack([m.as_array() for m in updated])
        A += xa.as_array() - A.mean(axis=0)
        members = [StateField.from_array(a) for a in A]
        x = xa
    return CycleResult(results, members)
