"""Strong-constraint 4DVar: full and incremental formulations.

The cost functions work on flat state vectors through a model object
(forward / tlm / adjoint aligned with the observation times) and an
observation operator (predict / tl / ad). The background error covariance
is diagonal; its square root is the elementwise standard deviation, which
is the control variable transform used to precondition the inner problem.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import linearized
from .observations import SWEObservationOperator, observe
from .optimize import LineSearchError, conjugate_gradient, lbfgs
from .swe import StateField, integrate

log = logging.getLogger(__name__)

DEFAULT_OUTER_ITERS = 3
DEFAULT_INNER_ITERS = 50
DEFAULT_INNER_TOL = 1e-4


@dataclass
class BackgroundModel:
    """Background state and diagonal error variances, both shaped like the state."""

    mean: StateField
    variances: StateField

    def __post_init__(self):
        if np.any(~(self.variances.as_array() > 0)):
            raise ValueError("background variances must be positive")

    @classmethod
    def from_sigmas(cls, mean, sigma_h, sigma_u, sigma_v=None):
        """Variances from a height std (m) and velocity stds (m/s).

        Velocity errors are mapped to momentum errors through the background height.
        """
        sigma_v = sigma_u if sigma_v is None else sigma_v
        h = mean.h
        var = StateField(np.full_like(h, sigma_h ** 2), (h * sigma_u) ** 2, (h * sigma_v) ** 2)
        return cls(mean, var)


@dataclass
class CostReport:
    total: float
    background: float
    observation: float
    grad_norm: float = float("nan")
    inner_iterations: int = 0


class SWEModel:
    """Shallow-water model restricted to one assimilation window."""

    def __init__(self, grid, t0, tf, obs_times, dt):
        self.grid = grid
        self.t0, self.tf = float(t0), float(tf)
        self.obs_times = np.asarray(obs_times, dtype=float)
        self.dt = dt
        self.shape = grid.shape

    def forward(self, x0):
        state = x0 if isinstance(x0, StateField) else StateField.from_vector(x0, self.shape)
        return integrate(state, self.grid, self.t0, self.tf,
                         record_times=np.concatenate([[self.t0], self.obs_times, [self.tf]]),
                         dt=self.dt)

    def states(self, traj):
        return [traj.state_at(t).to_vector() for t in self.obs_times]

    def tlm(self, traj, dx0):
        recs = linearized.tlm_records(traj, StateField.from_vector(dx0, self.shape))
        return [recs[traj.index_of(t)].to_vector() for t in self.obs_times]

    def adjoint(self, traj, forcings):
        pairs = [(t, StateField.from_vector(f, self.shape))
                 for t, f in zip(self.obs_times, forcings) if f is not None]
        return linearized.adjoint_sweep(traj, pairs).to_vector()


@dataclass
class Problem:
    """A 4DVar problem on flat vectors: model, observations, background."""

    model: object
    obs: object
    xb: np.ndarray
    b_var: np.ndarray

    @property
    def sqrt_b(self):
        return np.sqrt(self.b_var)


def make_swe_problem(grid, bg, obs, t0, tf, dt):
    model = SWEModel(grid, t0, tf, obs.times, dt)
    return Problem(model, SWEObservationOperator(obs), bg.mean.to_vector(),
                   bg.variances.to_vector())


def _vec(x):
    return x.to_vector() if isinstance(x, StateField) else np.asarray(x, dtype=float)


def innovation(traj, obs):
    """Observation-minus-model residuals D(t) = Y - H(X(t)), zero off the mask.

    Returns an array shaped (T, 3, nx, ny).
    """
    out = np.zeros_like(obs.values)
    for k, t in enumerate(obs.times):
        try:
            X = traj.state_at(t)
        except KeyError:
            raise KeyError(f"observation time {t} is not recorded in the trajectory") from None
        d = obs.values[k] - observe(X.as_array())
        out[k][obs.mask[k]] = d[obs.mask[k]]
    return out


def _obs_terms(problem, traj):
    xs = problem.model.states(traj)
    res = [problem.obs.values(k) - problem.obs.predict(k, xs[k]) for k in range(len(xs))]
    return xs, res


def cost_full(x0, problem, traj=None):
    """Nonlinear cost 0.5|x0 - xb|_B^2 + 0.5 sum_k |y_k - H(x_k)|_R^2."""
    x0 = _vec(x0)
    if traj is None:
        traj = problem.model.forward(x0)
    _, res = _obs_terms(problem, traj)
    dxb = x0 - problem.xb
    jb = 0.5 * float(dxb @ (dxb / problem.b_var))
    jo = 0.5 * sum(float(r @ (r / problem.obs.variances(k))) for k, r in enumerate(res))
    return CostReport(jb + jo, jb, jo)


def grad_full(x0, problem, traj=None):
    """Gradient B^-1 (x0 - xb) - lambda(t0) from one adjoint sweep."""
    x0 = _vec(x0)
    if traj is None:
        traj = problem.model.forward(x0)
    xs, res = _obs_terms(problem, traj)
    forcings = [problem.obs.ad(k, xs[k], r / problem.obs.variances(k)) for k, r in enumerate(res)]
    lam0 = problem.model.adjoint(traj, forcings)
    return (x0 - problem.xb) / problem.b_var - lam0


class IncrementalProblem:
    """Quadratic inner problem linearized about an outer-loop state.

    Control variable dz with dx = B^{1/2} dz. With reset_background the
    background term penalizes dz toward zero (background reset to the
    current outer state); otherwise toward B^{-1/2}(xb - x_outer).
    """

    def __init__(self, problem, x_outer, reset_background=True):
        self.problem = problem
        self.x_outer = _vec(x_outer).copy()
        self.traj = problem.model.forward(self.x_outer)
        self.xs, self.innovations = _obs_terms(problem, self.traj)
        self.sqrt_b = problem.sqrt_b
        if reset_background:
            self.zb = np.zeros_like(self.x_outer)
        else:
            self.zb = (problem.xb - self.x_outer) / self.sqrt_b
        self._b = None

    @property
    def size(self):
        return self.x_outer.size

    def _rinv(self, k, y):
        return y / self.problem.obs.variances(k)

    def _linear_obs(self, dz):
        dx_t = self.problem.model.tlm(self.traj, self.sqrt_b * dz)
        return [self.problem.obs.tl(k, self.xs[k], d) for k, d in enumerate(dx_t)]

    def _adjoint_obs(self, ys):
        obs = self.problem.obs
        forcings = [obs.ad(k, self.xs[k], y) for k, y in enumerate(ys)]
        return self.sqrt_b * self.problem.model.adjoint(self.traj, forcings)

    def cost_grad(self, dz):
        dz = np.asarray(dz, dtype=float)
        hdx = self._linear_obs(dz)
        res = [hd - d for hd, d in zip(hdx, self.innovations)]
        jb = 0.5 * float((dz - self.zb) @ (dz - self.zb))
        jo = 0.5 * sum(float(r @ self._rinv(k, r)) for k, r in enumerate(res))
        # adjoint forced by H'^T R^-1 (D - H' M' dx); gradient = dz - zb - B^{1/2} lambda(t0)
        lam = self._adjoint_obs([-self._rinv(k, r) for k, r in enumerate(res)])
        return jb + jo, (dz - self.zb) - lam, CostReport(jb + jo, jb, jo)

    def hessvec(self, v):
        hdx = self._linear_obs(v)
        return v + self._adjoint_obs([self._rinv(k, y) for k, y in enumerate(hdx)])

    @property
    def rhs(self):
        """Linear term: zb + B^{1/2} sum_k M'^T H'^T R^-1 D_k."""
        if self._b is None:
            self._b = self.zb + self._adjoint_obs(
                [self._rinv(k, d) for k, d in enumerate(self.innovations)])
        return self._b

    def increment(self, dz):
        return self.sqrt_b * dz


def cost_grad_incremental(dz, inc):
    """(J, grad J) of the incremental cost in control space."""
    J, g, _ = inc.cost_grad(dz)
    return J, g


def inner_minimize(problem, max_iter=DEFAULT_INNER_ITERS, tol=DEFAULT_INNER_TOL, x0=None):
    """Solve the inner problem.

    An IncrementalProblem (quadratic) is solved by conjugate gradients on
    H dz = b. A Problem (nonlinear full cost) is minimized by L-BFGS over the
    preconditioned variable z, x = xb + B^{1/2} z.
    """
    if isinstance(problem, IncrementalProblem):
        return conjugate_gradient(problem.hessvec, problem.rhs, x0=x0, max_iter=max_iter, tol=tol)
    sb = problem.sqrt_b
    cache = {}

    def evaluate(z):
        key = z.tobytes()
        if key not in cache:
            x = problem.xb + sb * z
            traj = problem.model.forward(x)
            cache.clear()
            cache[key] = (cost_full(x, problem, traj).total, sb * grad_full(x, problem, traj))
        return cache[key]

    z0 = np.zeros_like(problem.xb) if x0 is None else np.asarray(x0, dtype=float)
    result = lbfgs(lambda z: evaluate(z)[0], lambda z: evaluate(z)[1], z0,
                   max_iter=max_iter, tol=tol)
    result.x = problem.xb + sb * result.x
    return result


@dataclass
class FourDVarResult:
    analysis: np.ndarray
    trajectory: object
    reports: list = field(default_factory=list)
    diverged: bool = False
    outer_iterations: int = 0


def _report(problem, x, inner_iterations=0, background=None):
    """Nonlinear cost report at x; background overrides problem.xb for the Jb term."""
    if background is not None:
        problem = Problem(problem.model, problem.obs, background, problem.b_var)
    traj = problem.model.forward(x)
    rep = cost_full(x, problem, traj)
    rep.grad_norm = float(np.linalg.norm(grad_full(x, problem, traj)))
    rep.inner_iterations = inner_iterations
    return rep, traj


def run_4dvar(problem, outer_iters=DEFAULT_OUTER_ITERS, inner_iters=DEFAULT_INNER_ITERS,
              inner_tol=DEFAULT_INNER_TOL, reset_background=True, x_init=None):
    """Incremental 4DVar outer loop.

    Each outer iteration relinearizes about the current state, solves the
    quadratic inner problem by CG and adds the increment. The monitored cost
    is the nonlinear version of the problem being solved: with
    reset_background the background in force is the previous outer state,
    so report i has Jb = 0.5|dx_i|_B^2 and Jo = Jo(x_i); otherwise the
    original background is used throughout. An outer step that raises this
    cost is rejected, the loop stops and the best iterate is returned with
    diverged=True.
    """
    x = problem.xb.copy() if x_init is None else _vec(x_init).copy()
    rep, traj = _report(problem, x, background=x if reset_background else None)
    reports = [rep]
    diverged = False
    done = 0
    for it in range(outer_iters):
        inc = IncrementalProblem(problem, x, reset_background=reset_background)
        sol = inner_minimize(inc, max_iter=inner_iters, tol=inner_tol)
        if not np.any(sol.x):
            break
        x_new = x + inc.increment(sol.x)
        try:
            rep_new, traj_new = _report(problem, x_new, sol.iterations,
                                        background=x if reset_background else None)
        except ValueError as exc:  # dry cell or CFL failure in the updated state
            log.warning("outer iteration %d rejected: %s", it, exc)
            diverged = True
            break
        previous = reports[-1].observation if reset_background else reports[-1].total
        if rep_new.total > previous:
            # a round-off level increase just means the outer loop has stagnated
            level = logging.INFO if rep_new.total <= previous * (1 + 1e-8) else logging.WARNING
            log.log(level, "outer iteration %d increased the cost (%.6g -> %.6g); keeping best iterate",
                    it, previous, rep_new.total)
            diverged = True
            break
        x, traj = x_new, traj_new
        reports.append(rep_new)
        done += 1
    return FourDVarResult(x, traj, reports, diverged, done)


def run_4dvar_full(problem, max_iter=DEFAULT_INNER_ITERS, tol=DEFAULT_INNER_TOL):
    """Non-incremental 4DVar: quasi-Newton on the nonlinear cost with adjoint gradients."""
    rep, _ = _report(problem, problem.xb)
    try:
        sol = inner_minimize(problem, max_iter=max_iter, tol=tol)
        x, diverged = sol.x, False
    except LineSearchError as exc:
        log.warning("%s; returning last iterate", exc)
        x, diverged = problem.xb + problem.sqrt_b * exc.x, True
        sol = None
    rep_a, traj = _report(problem, x, 0 if sol is None else sol.iterations)
    return FourDVarResult(x, traj, [rep, rep_a], diverged, 1)


def dense_matrix(apply, n):
    """Dense matrix of a linear map given by its action on vectors of length n."""
    cols = [apply(e) for e in np.eye(n)]
    return np.column_stack(cols)


MAX_DENSE_STATE = 3 * 8 * 8


def hessian_conditioning_report(problem, x_lin=None):
    """Condition numbers of the raw and preconditioned Gauss-Newton Hessians.

    Also evaluates the upper bounds kappa(B)(1 + lmin(B) S / sigma) and
    (1 + lmax(B) S / sigma), where S = n_obs * max_k lmax(C_k),
    C_k = (H' M'_k)^T (H' M'_k) and sigma is the smallest observation
    variance; the time integral is the sum over observation instants.
    """
    n = problem.xb.size
    if n > MAX_DENSE_STATE:
        raise ValueError(f"state dimension {n} too large for dense assembly (max {MAX_DENSE_STATE})")
    inc = IncrementalProblem(problem, problem.xb if x_lin is None else x_lin)
    sb = inc.sqrt_b
    n_obs = len(problem.obs)
    # G_k columns: H'_k M'_k e_j
    tl_cols = [problem.model.tlm(inc.traj, e) for e in np.eye(n)]
    G = [np.column_stack([problem.obs.tl(k, inc.xs[k], cols[k]) for cols in tl_cols])
         for k in range(n_obs)]
    rinv = [1.0 / problem.obs.variances(k) for k in range(n_obs)]
    data = sum((g.T * r) @ g for g, r in zip(G, rinv)) if n_obs else np.zeros((n, n))
    hess = np.diag(1.0 / problem.b_var) + data
    hess_pre = np.eye(n) + (sb[:, None] * data) * sb[None, :]
    eig = np.linalg.eigvalsh(hess)
    eig_pre = np.linalg.eigvalsh(hess_pre)
    lam_c = max((np.linalg.eigvalsh(g.T @ g)[-1] for g in G if g.size), default=0.0)
    sigma = min((float(np.min(problem.obs.variances(k))) for k in range(n_obs)
                 if problem.obs.variances(k).size), default=np.inf)
    s = n_obs * lam_c
    bmin, bmax = float(problem.b_var.min()), float(problem.b_var.max())
    return {
        "kappa_raw": float(eig[-1] / eig[0]),
        "kappa_preconditioned": float(eig_pre[-1] / eig_pre[0]),
        "bound_raw": (bmax / bmin) * (1.0 + bmin * s / sigma),
        "bound_preconditioned": 1.0 + bmax * s / sigma,
        "hessian": hess,
        "hessian_preconditioned": hess_pre,
    }
