import numpy as np
import pytest

from dakit.observations import ObservationSet, mask_from_name
from dakit.stochastics import (GrfSpec, SeededRng, balance_ensemble, exponential_covariance,
                               make_ensemble_gauss, make_ensemble_para, perturb_observations,
                               planar_surface, recenter, sample_grf)
from dakit.swe import GridSpec, stable_dt

from conftest import tilted_state


@pytest.fixture
def grid():
    return GridSpec.from_extent(6, 8, 0.06, 0.08)


def test_same_seed_same_draws(grid):
    spec = GrfSpec(1e-6, 0.2)
    a = sample_grf(grid, spec, SeededRng(4, 2))
    b = sample_grf(grid, spec, SeededRng(4, 2))
    c = sample_grf(grid, spec, SeededRng(4, 3))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert SeededRng(1).child(0) != SeededRng(1).child(1)


def test_grf_spec_validation():
    with pytest.raises(ValueError):
        GrfSpec(-1.0, 0.1)
    with pytest.raises(ValueError):
        GrfSpec(1.0, 1.5)
    with pytest.raises(ValueError):
        GrfSpec(1.0, 0.1, "w")


def test_grf_empirical_covariance(grid):
    """Monte Carlo: unit variance and correlation e^-1 at one decorrelation length."""
    spec = GrfSpec(1.0, 0.25)
    gen = np.random.default_rng(0)
    draws = np.stack([sample_grf(grid, spec, gen).ravel() for _ in range(4000)])
    pts = grid.points()
    ell = spec.length * grid.length
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    i, j = np.unravel_index(np.argmin(np.abs(d - ell)), d.shape)  # pair nearest one length apart
    emp = np.corrcoef(draws[:, i], draws[:, j])[0, 1]
    assert emp == pytest.approx(np.exp(-d[i, j] / ell), abs=0.03)
    assert draws.var(axis=0).mean() == pytest.approx(1.0, abs=0.05)
    np.testing.assert_allclose(exponential_covariance(grid, 2.0, ell).diagonal(), 2.0)


def test_grf_covariance_frobenius_error_within_sampling_noise():
    grid = GridSpec.from_extent(5, 5, 0.05, 0.05)
    spec = GrfSpec(1.0, 0.3)
    C = exponential_covariance(grid, 1.0, spec.length * grid.length)
    gen = np.random.default_rng(3)
    n_draw = 10_000
    Z = np.stack([sample_grf(grid, spec, gen).ravel() for _ in range(n_draw)])
    err = np.linalg.norm(Z.T @ Z / n_draw - C)
    # for Gaussian fields E||S - C||_F^2 = (||C||_F^2 + tr(C)^2) / n
    se = np.sqrt((np.sum(C**2) + np.trace(C) ** 2) / n_draw)
    assert err < 3 * se


def test_zero_variance_field_is_zero(grid):
    assert not np.any(sample_grf(grid, GrfSpec(0.0, 0.2), 0))


def test_gauss_ensemble_mean_converges(grid):
    bg = tilted_state(grid)
    specs = [GrfSpec(1e-6, 0.2, "h"), GrfSpec(1e-6, 0.2, "u")]
    members = make_ensemble_gauss(bg, grid, 256, specs, 1)
    mean = np.mean([m.h for m in members], axis=0)
    # standard error of the mean is 1e-3 / 16
    assert np.abs(mean - bg.h).max() < 5 * 1e-3 / 16
    assert np.all([np.array_equal(m.hv, bg.hv) for m in members])
    with pytest.raises(ValueError):
        make_ensemble_gauss(bg, grid, 1, specs, 1)


def test_para_ensemble_is_planar_and_centered(grid):
    bg = tilted_state(grid, sx=0.2)
    members = make_ensemble_para(bg, grid, 16, 5)
    np.testing.assert_allclose(np.mean([m.h for m in members], axis=0), bg.h, atol=1e-15)
    assert all(not np.any(m.hu) and not np.any(m.hv) for m in members)
    # anomalies are planar, so second differences vanish
    for m in members:
        a = m.h - bg.h
        assert np.abs(np.diff(a, 2, axis=0)).max() < 1e-14
        assert np.abs(np.diff(a, 2, axis=1)).max() < 1e-14


def test_para_ensemble_collapses_for_degenerate_ranges(grid):
    bg = tilted_state(grid, sx=0.2)
    members = make_ensemble_para(bg, grid, 4, 0, x_range=(0.2, 0.2), y_range=(0.0, 0.0))
    for m in members:
        np.testing.assert_allclose(m.h, bg.h, atol=1e-15)
    np.testing.assert_allclose(planar_surface(grid, 0.035, 0.2, 0.0), bg.h, atol=1e-15)


def test_balancing_and_recentering(grid):
    bg = tilted_state(grid)
    members = make_ensemble_para(bg, grid, 4, 2)
    dt = stable_dt(bg, grid, 0.5)
    assert balance_ensemble(members, grid, 0, dt)[1].h is not members[1].h
    bal = balance_ensemble(members, grid, 5, dt)
    assert all(np.any(m.hu) for m in bal)  # tilted surfaces start to slosh
    masses = [m.mass(grid) for m in members]
    np.testing.assert_allclose([m.mass(grid) for m in bal], masses, rtol=1e-13)
    rc = recenter(bal, bg)
    np.testing.assert_allclose(np.mean([m.as_array() for m in rc], axis=0), bg.as_array(),
                               atol=1e-15)
    np.testing.assert_allclose(rc[0].as_array() - rc[1].as_array(),
                               bal[0].as_array() - bal[1].as_array(), atol=1e-15)
    with pytest.raises(ValueError):
        balance_ensemble(members, grid, -1, dt)


def test_observation_noise_statistics(grid):
    T = 110  # 110 * 2 * 48 > 1e4 draws
    mask = mask_from_name("full", T, grid.shape)
    mask[:, 2] = False
    var = np.full(mask.shape, 4e-6)
    obs = ObservationSet(np.arange(T, dtype=float), mask, np.zeros(mask.shape), var)
    noisy = perturb_observations(obs, 11)
    noise = noisy.values[mask]
    assert noise.std() == pytest.approx(2e-3, rel=0.02)
    assert not np.any(noisy.values[~mask])
    clean = perturb_observations(obs, 11, variances=0.0)
    np.testing.assert_array_equal(clean.values, obs.values)
