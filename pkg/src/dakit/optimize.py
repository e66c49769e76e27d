"""Inner-loop solvers: matrix-free conjugate gradient and L-BFGS."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import line_search

log = logging.getLogger(__name__)


class LineSearchError(RuntimeError):
    def __init__(self, message, x):
        super().__init__(message)
        self.x = x


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    grad_norm: float
    converged: bool
    history: list


def conjugate_gradient(hessvec, b, x0=None, max_iter=50, tol=1e-4):
    """Minimize 0.5 x.Hx - b.x with H symmetric positive definite.

    Stops when ||Hx - b|| <= tol * ||H x0 - b|| or after max_iter iterations.
    """
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - hessvec(x) if x0 is not None else b.copy()
    r0 = np.linalg.norm(r)
    history = [r0]
    if r0 == 0.0:
        return SolveResult(x, 0, 0.0, True, history)
    p = r.copy()
    rr = r @ r
    k = 0
    while k < max_iter:
        Ap = hessvec(p)
        pAp = p @ Ap
        if pAp <= 0:
            raise np.linalg.LinAlgError("Hessian is not positive definite along a search direction")
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        k += 1
        history.append(np.sqrt(rr_new))
        if np.sqrt(rr_new) <= tol * r0:
            return SolveResult(x, k, float(np.sqrt(rr_new)), True, history)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return SolveResult(x, k, float(np.sqrt(rr)), False, history)


def lbfgs(fun, grad, x0, max_iter=50, tol=1e-4, memory=8):
    """Limited-memory BFGS with a strong-Wolfe line search.

    Stops when ||g|| <= tol * ||g0||. Raises LineSearchError carrying the last
    iterate when no step satisfying the Wolfe conditions is found.
    """
    x = np.array(x0, dtype=float)
    f = fun(x)
    g = grad(x)
    g0 = np.linalg.norm(g)
    history = [f]
    if g0 == 0.0:
        return SolveResult(x, 0, 0.0, True, history)
    s_list, y_list = [], []
    for k in range(max_iter):
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(s_list), reversed(y_list)):
            a = (s @ q) / (y @ s)
            alphas.append(a)
            q -= a * y
        if s_list:
            gamma = (s_list[-1] @ y_list[-1]) / (y_list[-1] @ y_list[-1])
        else:
            gamma = 1.0 / g0
        q *= gamma
        for (s, y), a in zip(zip(s_list, y_list), reversed(alphas)):
            q += s * (a - (y @ q) / (y @ s))
        d = -q

        step, _, _, f_new, _, g_new = line_search(fun, grad, x, d, gfk=g, old_fval=f, c2=0.9)
        if step is None:
            raise LineSearchError(f"Wolfe line search failed at iteration {k}", x)
        s = step * d
        x = x + s
        if g_new is None:
            g_new = grad(x)
        y = g_new - g
        if y @ s > 1e-12 * np.linalg.norm(y) * np.linalg.norm(s):
            s_list.append(s)
            y_list.append(y)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
        f, g = f_new, g_new
        history.append(f)
        gn = np.linalg.norm(g)
        if gn <= tol * g0:
            return SolveResult(x, k + 1, float(gn), True, history)
    return SolveResult(x, max_iter, float(np.linalg.norm(g)), False, history)
