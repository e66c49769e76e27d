"""Seeded random fields, ensembles and observation perturbations."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .swe import StateField, step

log = logging.getLogger(__name__)

DEFAULT_BALANCE_STEPS = 5
DEFAULT_X_SLOPES = (0.15, 0.25)
DEFAULT_Y_SLOPES = (-0.10, 0.10)


@dataclass(frozen=True)
class SeededRng:
    """A (seed, stream) pair; identical pairs give identical draws."""

    seed: int
    stream: int = 0

    def generator(self):
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(self.stream,)))

    def child(self, stream):
        """Independent stream derived from this one, e.g. one per ensemble member."""
        return SeededRng(self.seed, self.stream * 1_000_003 + stream + 1)


def _generator(rng):
    if isinstance(rng, SeededRng):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class GrfSpec:
    """Exponential-covariance Gaussian random field.

    variance in field units squared; length as a fraction of the longest
    domain side; component is 'h', 'u' or 'v'.
    """

    variance: float
    length: float
    component: str = "h"

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be non-negative")
        if not 0 < self.length < 1:
            raise ValueError("decorrelation length must be a fraction in (0, 1)")
        if self.component not in ("h", "u", "v"):
            raise ValueError(f"unknown component {self.component!r}")


_factor_cache = {}


def exponential_covariance(grid, variance, length_m):
    d = cdist(grid.points(), grid.points())
    return variance * np.exp(-d / length_m)


def grf_factor(grid, spec):
    """Lower Cholesky factor of the GRF covariance, with a jitter fallback."""
    key = (grid, spec.variance, spec.length)
    if key in _factor_cache:
        return _factor_cache[key]
    cov = exponential_covariance(grid, spec.variance, spec.length * grid.length)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        log.warning("GRF covariance not numerically positive definite; adding jitter")
        L = np.linalg.cholesky(cov + 1e-12 * spec.variance * np.eye(len(cov)))
    _factor_cache[key] = L
    return L


def sample_grf(grid, spec, rng):
    """One zero-mean draw shaped (nx, ny)."""
    gen = _generator(rng)
    if spec.variance == 0:
        return np.zeros(grid.shape)
    z = gen.standard_normal(grid.size)
    return (grf_factor(grid, spec) @ z).reshape(grid.shape)


def perturb_state(state, grid, specs, rng):
    """state plus independent GRF draws; u/v draws are converted to momentum."""
    gen = _generator(rng)
    h, hu, hv = state.h.copy(), state.hu.copy(), state.hv.copy()
    for spec in specs:
        field = sample_grf(grid, spec, gen)
        if spec.component == "h":
            h = h + field
        elif spec.component == "u":
            hu = hu + state.h * field
        else:
            hv = hv + state.h * field
    return StateField(h, hu, hv)


def make_ensemble_gauss(background, grid, N, specs, rng):
    """N members, each the background plus GRF draws on its own stream."""
    if N < 2:
        raise ValueError("an ensemble needs at least 2 members")
    root = rng if isinstance(rng, SeededRng) else SeededRng(int(rng))
    return [perturb_state(background, grid, specs, root.child(i)) for i in range(N)]


def planar_surface(grid, mean_depth, x_slope, y_slope):
    """Free surface mean_depth + sx (x - xc) + sy (y - yc)."""
    x, y = grid.centers()
    return mean_depth + x_slope * (x - 0.5 * grid.lx) + y_slope * (y - 0.5 * grid.ly)


def make_ensemble_para(background, grid, N, rng, x_range=DEFAULT_X_SLOPES, y_range=DEFAULT_Y_SLOPES):
    """Planar-surface members with uniform random slopes and zero momentum.

    Members are re-centered so their mean height equals the background height.
    """
    if N < 2:
        raise ValueError("an ensemble needs at least 2 members")
    root = rng if isinstance(rng, SeededRng) else SeededRng(int(rng))
    mean_depth = float(background.h.mean())
    surfaces = []
    for i in range(N):
        gen = root.child(i).generator()
        sx = gen.uniform(*x_range)
        sy = gen.uniform(*y_range)
        surfaces.append(planar_surface(grid, mean_depth, sx, sy))
    surfaces = np.stack(surfaces)
    surfaces += background.h - surfaces.mean(axis=0)
    zero = np.zeros(grid.shape)
    return [StateField(s, zero.copy(), zero.copy()) for s in surfaces]


def balance_ensemble(members, grid, n_steps, dt):
    """Advance every member n_steps nonlinear steps of size dt."""
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    out = []
    for m in members:
        s = m.copy()
        for _ in range(n_steps):
            s = step(s, grid, dt)
        out.append(s)
    return out


def recenter(members, center):
    """Shift members so that their mean equals center, keeping the anomalies."""
    A = np.stack([m.as_array() for m in members])
    A += center.as_array() - A.mean(axis=0)
    return [StateField.from_array(a) for a in A]


def perturb_observations(obs, rng, variances=None):
    """Add N(0, variance) noise to every observed value.

    variances defaults to the error variances carried by obs; zeros give the
    clean observations back.
    """
    gen = _generator(rng)
    var = obs.variances if variances is None else np.broadcast_to(variances, obs.values.shape)
    noise = gen.standard_normal(obs.values.shape) * np.sqrt(np.where(obs.mask, var, 0.0))
    return obs.with_values(np.where(obs.mask, obs.values + noise, obs.values))
