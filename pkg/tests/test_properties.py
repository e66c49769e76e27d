"""Randomized invariants across modules."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dakit.en4dvar import (EnsembleProblem, SqrtB, anomalies, build_localization, etkf_update,
                           enkf_update_perturbed)
from dakit.harness.oracles import kalman_gain, kalman_gain_information
from dakit.observations import LinearObservationOperator
from dakit.stochastics import GrfSpec, SeededRng, make_ensemble_para, sample_grf
from dakit.swe import GridSpec

from conftest import tilted_state

seeds = st.integers(0, 2**32 - 1)


def _gen(seed):
    return np.random.default_rng(seed)


@given(seed=seeds, n=st.integers(3, 15), N=st.integers(2, 10))
def test_anomalies_sum_to_zero(seed, n, N):
    X = _gen(seed).standard_normal((n, N)) * 10.0 ** _gen(seed + 1).uniform(-3, 3)
    Xp = anomalies(X)
    assert np.abs(Xp.sum(axis=1)).max() <= 1e-13 * max(np.abs(X).max(), 1e-300) * N
    assert np.linalg.matrix_rank(Xp) <= N - 1


@given(seed=seeds, N=st.integers(2, 6), m=st.integers(1, 8))
def test_etkf_anomalies_zero_sum(seed, N, m):
    g = _gen(seed)
    X = g.standard_normal((9, N))
    H = g.standard_normal((m, 9))
    r = g.uniform(0.1, 2.0, m)
    Xa = etkf_update(X, H @ X, g.standard_normal(m), r)
    A = Xa - Xa.mean(axis=1, keepdims=True)
    scale = np.abs(X - X.mean(axis=1, keepdims=True)).max()
    assert np.abs(A.sum(axis=1)).max() <= 1e-12 * scale * N


@given(seed=seeds, n=st.integers(2, 12), m=st.integers(1, 6))
def test_kalman_gain_forms_agree(seed, n, m):
    g = _gen(seed)
    A = g.standard_normal((n, n))
    P = A @ A.T + np.eye(n)
    H = g.standard_normal((m, n))
    R = np.diag(g.uniform(0.5, 2.0, m))
    K1, K2 = kalman_gain(P, H, R), kalman_gain_information(P, H, R)
    tol = max(1e-10, 100 * np.finfo(float).eps * np.linalg.cond(P))
    assert np.abs(K1 - K2).max() <= tol * np.abs(K1).max()


@settings(max_examples=20)
@given(seed=seeds, N=st.integers(2, 6), L=st.floats(0.005, 0.05))
def test_localization_never_lowers_rank(seed, N, L):
    grid = GridSpec.from_extent(3, 3, 0.03, 0.03)
    X = anomalies(_gen(seed).standard_normal((27, N)))
    loc = build_localization(grid, "gaspari-cohn", L, r=grid.size)
    B = X @ X.T
    S = SqrtB(X, loc).dense()
    tol = 1e-10 * np.abs(B).max()
    assert np.linalg.matrix_rank(S @ S.T, tol=tol) >= np.linalg.matrix_rank(B, tol=tol)


@given(seed=seeds, t=st.floats(-3, 3))
def test_ensemble_cost_is_quadratic_along_lines(seed, t):
    g = _gen(seed)
    X = g.standard_normal((7, 4))
    H = g.standard_normal((3, 7))
    obs = LinearObservationOperator(H, [g.standard_normal(3)], [g.uniform(0.5, 2, 3)])
    prob = EnsembleProblem([X.mean(axis=1)], [SqrtB(anomalies(X), n_components=1)], obs)
    z, d = g.standard_normal(prob.size), g.standard_normal(prob.size)
    J = lambda s: prob.cost_grad(z + s * d)[0]
    J0, g0 = prob.cost_grad(z)
    exact = J0 + t * (g0 @ d) + 0.5 * t * t * (d @ prob.hessvec(d))
    assert J(t) == pytest.approx(exact, rel=1e-11, abs=1e-11)


@given(seed=st.integers(0, 1000), stream=st.integers(0, 1000))
def test_seeded_streams_are_deterministic(seed, stream):
    grid = GridSpec.from_extent(3, 4, 0.03, 0.04)
    spec = GrfSpec(1.0, 0.2)
    a = sample_grf(grid, spec, SeededRng(seed, stream))
    b = sample_grf(grid, spec, SeededRng(seed, stream))
    assert np.array_equal(a, b)
    X = _gen(seed).standard_normal((5, 3))
    y, r = np.ones(2), np.ones(2)
    HX = X[:2]
    assert np.array_equal(enkf_update_perturbed(X, HX, y, r, SeededRng(seed, stream)),
                          enkf_update_perturbed(X, HX, y, r, SeededRng(seed, stream)))


@given(seed=seeds, N=st.integers(2, 20), sx=st.floats(0.0, 0.3))
def test_para_ensemble_mean_is_exact(seed, N, sx):
    grid = GridSpec.from_extent(4, 5, 0.04, 0.05)
    bg = tilted_state(grid, sx=sx)
    members = make_ensemble_para(bg, grid, N, SeededRng(seed % 2**31))
    assert np.abs(np.mean([m.h for m in members], axis=0) - bg.h).max() <= 4 * np.finfo(float).eps * 0.05
