import json

import numpy as np
import pytest

from dakit import cli
from dakit.harness.config import (ExperimentConfig, config_key, format_config, load_config,
                                  parse_config)
from dakit.harness.oracles import (LinearModel, advection_matrix, dense_hessian_oracle,
                                   exact_riemann, kalman_gain, kalman_gain_information,
                                   kalman_oracle, riemann_star)
from dakit.harness.twin import (StageError, build_case, inflate_missing_obs_error, make_grid,
                                make_observations, rmse, rmse_traj, run_experiment, setup_twin)
from dakit.observations import mask_from_name
from dakit.stochastics import SeededRng
from dakit.swe import integrate, read_swf

FAST = dict(window_tf=0.05, window_n_obs=3, inner_iters=20)


# -- configuration --------------------------------------------------------------

def test_config_round_trip():
    cfg = ExperimentConfig(case="B", method="en4dvar", loc_enabled=True, ens_para_x_range=(0.1, 0.3),
                           bg_sigma_h=2e-3, seed=7)
    assert parse_config(format_config(cfg)) == cfg
    assert config_key("ens_init_variance_h") == "ens.init.variance_h"
    assert config_key("window_n_obs") == "window.n_obs"
    assert "loc.cutoff = 0.0125" in format_config(ExperimentConfig())


def test_config_parsing_and_errors(tmp_path):
    cfg = parse_config("case = B  # comment\n\nens.size = 8\nloc.enabled = yes\n")
    assert (cfg.case, cfg.ens_size, cfg.loc_enabled) == ("B", 8, True)
    assert cfg.truth_parameters() == (0.21, 0.10, 0.0)
    for bad in ("nokey", "bogus.key = 1", "loc.enabled = maybe", "ens.para.x_range = 1",
                "method = kalman", "window.tf = -1"):
        with pytest.raises(ValueError):
            parse_config(bad)
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.cfg")
    p = tmp_path / "a.cfg"
    p.write_text("seed = 3\n")
    assert load_config(p).seed == 3


def test_observation_times_slide_by_one():
    cfg = ExperimentConfig(cycle_windows=5)
    assert np.allclose(cfg.obs_times(), np.arange(9) * 0.05)


# -- twin construction ------------------------------------------------------------

def test_case_construction():
    cfg = ExperimentConfig(case="B")
    truth, bg = build_case(cfg)
    grid = make_grid(cfg)
    assert bg.h.mean() == pytest.approx(cfg.depth)
    assert not np.any(bg.hu) and not np.any(bg.hv)
    # case B has no height noise: the difference is a plane
    d = truth.h - bg.h
    assert np.abs(np.diff(d, 2, axis=0)).max() < 1e-14
    assert truth.h.shape == grid.shape


def test_case_a_background_error_matches_grf_std():
    """Monte Carlo over seeds: the background height error is the GRF std, 1.265 mm."""
    errs = [np.sqrt(np.mean((lambda tb: (tb[0].h - tb[1].h) ** 2)(build_case(ExperimentConfig(seed=s)))))
            for s in range(40)]
    assert np.sqrt(np.mean(np.square(errs))) == pytest.approx(np.sqrt(1.6e-6), rel=0.10)


def test_observations_and_noise():
    cfg = ExperimentConfig(**FAST)
    grid, truth0, _, _, truth, obs, _ = setup_twin(cfg)
    assert obs.mask[:, 0].sum() == 0 and obs.mask[:, 1:].all()
    mask = mask_from_name("full", len(obs.times), grid.shape)
    clean = make_observations(truth, obs.times, mask, (1e-150, 1e-150, 1e-150), SeededRng(0))
    from dakit.observations import observe
    np.testing.assert_allclose(clean.values[-1], observe(truth.state_at(obs.times[-1]).as_array()),
                               atol=1e-140)


def test_missing_observation_inflation():
    valid = np.zeros((5, 5), dtype=bool)
    valid[2, 2] = True
    var = inflate_missing_obs_error(valid, 1e-3, 0.5)
    assert var[2, 2] == pytest.approx(1e-6)
    assert var[2, 4] == pytest.approx((1e-3 * 2.0) ** 2)
    assert var[0, 0] > var[1, 1] > var[2, 2]
    with pytest.raises(ValueError):
        inflate_missing_obs_error(np.zeros((2, 2), bool), 1e-3, 0.5)


def test_rmse_definitions():
    cfg = ExperimentConfig(**FAST)
    grid, truth0, bg0, _, truth, obs, dt = setup_twin(cfg)
    r = rmse([bg0], [truth0], [0.0])
    assert r.h[0] == pytest.approx(np.sqrt(np.mean((bg0.h - truth0.h) ** 2)))
    du = truth0.hu / truth0.h - bg0.hu / bg0.h
    assert r.u[0] == pytest.approx(np.sqrt(np.mean(du ** 2)))
    assert r.time_mean()["velocity"] == pytest.approx(np.sqrt(0.5 * (r.u[0] ** 2 + r.v[0] ** 2)))
    assert np.all(rmse_traj(truth, truth).h == 0)
    with pytest.raises(ValueError):
        rmse([bg0], [truth0, truth0], [0.0])
    with pytest.raises(KeyError):
        rmse_traj(truth, truth, [0.0123])


# -- oracles --------------------------------------------------------------------

def test_scalar_kalman_filter():
    steps = kalman_oracle(np.eye(1), np.eye(1), np.eye(1) * 2.0, np.eye(1) * 2.0, np.zeros(1),
                          [np.array([1.0])], [0])
    assert steps[0].analysis[0] == pytest.approx(0.5)
    assert steps[0].analysis_cov[0, 0] == pytest.approx(1.0)


def test_kalman_ignores_uninformative_observations():
    n = 10
    M = advection_matrix(n, 0.3)
    B = np.diag(np.linspace(0.5, 1.5, n))
    xb = np.arange(n, dtype=float)
    res = kalman_oracle(M, np.eye(n)[:4], np.eye(4) * 1e12, B, xb, [np.ones(4)] * 2, [1, 3])
    np.testing.assert_allclose(res[-1].analysis, np.linalg.matrix_power(M, 3) @ xb, rtol=1e-10)


def test_gain_forms_agree():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((10, 10))
    P = A @ A.T + np.eye(10)
    H = rng.standard_normal((4, 10))
    R = np.diag(rng.uniform(0.5, 2, 4))
    np.testing.assert_allclose(kalman_gain(P, H, R), kalman_gain_information(P, H, R), atol=1e-10)
    with pytest.raises(ValueError):
        kalman_oracle(np.eye(101), np.eye(101), np.eye(101), np.eye(101), np.zeros(101), [], [])


def test_linear_model_adjoint():
    rng = np.random.default_rng(1)
    model = LinearModel(advection_matrix(8, 0.7), [0, 2, 5])
    dx = rng.standard_normal(8)
    f = [rng.standard_normal(8) for _ in range(3)]
    lhs = sum(a @ b for a, b in zip(model.tlm(None, dx), f))
    assert lhs == pytest.approx(dx @ model.adjoint(None, f), rel=1e-13)
    with pytest.raises(ValueError):
        LinearModel(np.eye(2), [3, 1])
    with pytest.raises(ValueError):
        advection_matrix(4, 1.5)


def test_dense_hessian_oracle_on_quadratic():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])

    class Quad:
        size = 2

        def cost_grad(self, z):
            return 0.5 * z @ A @ z, A @ z

    np.testing.assert_allclose(dense_hessian_oracle(Quad()), A)


def test_exact_riemann_conserves_and_matches_limits():
    g = 9.81
    hs, us = riemann_star(1.0, 0.0, 0.5, 0.0, g)
    assert 0.5 < hs < 1.0 and us > 0
    h, u = exact_riemann(1.0, 0.0, 0.5, 0.0, g, [-100.0, 100.0])
    np.testing.assert_allclose(h, [1.0, 0.5])
    h, u = exact_riemann(1.0, 0.0, 1.0, 0.0, g, np.linspace(-5, 5, 11))
    np.testing.assert_allclose(h, 1.0, atol=1e-12)
    np.testing.assert_allclose(u, 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        riemann_star(0.01, -10.0, 0.01, 10.0, g)


# -- experiment driver --------------------------------------------------------------

def test_method_none_reproduces_free_run():
    r = run_experiment(ExperimentConfig(method="none", **FAST))
    np.testing.assert_array_equal(r.rmse.h, r.background_rmse.h)
    np.testing.assert_array_equal(r.rmse.u, r.background_rmse.u)


def test_experiment_outputs_and_determinism(tmp_path):
    cfg = ExperimentConfig(method="4dvar", **FAST)
    a = run_experiment(cfg, output=tmp_path / "a")
    b = run_experiment(load_config(tmp_path / "a" / "manifest.cfg"), output=tmp_path / "b")
    for name in ("rmse.csv", "cost.csv", "background_rmse.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert set(man["sha256"]) == {"rmse.csv", "cost.csv", "background_rmse.csv"}
    state, grid = read_swf(tmp_path / "a" / "analysis_w0.swf")
    assert grid.shape == make_grid(cfg).shape
    assert a.meta["time_mean_rmse"]["velocity"] < a.meta["time_mean_rmse_background"]["velocity"]


def test_stage_errors_are_tagged():
    cfg = ExperimentConfig(grid_nx=1, **FAST)
    with pytest.raises(StageError) as exc:
        run_experiment(cfg)
    assert exc.value.stage == "setup"


# -- command line ----------------------------------------------------------------

def test_cli_commands(tmp_path, capsys):
    common = ["--set", "window.tf = 0.05", "--set", "window.n_obs = 3"]
    assert cli.main(["simulate", *common, "--out", str(tmp_path / "sim"), "--snapshots", "3"]) == 0
    assert len(list((tmp_path / "sim").glob("truth_*.swf"))) == 3
    assert cli.main(["twin-gen", *common, "--out", str(tmp_path / "twin")]) == 0
    assert (tmp_path / "twin" / "observations.csv").exists()
    cli.main(["assim-en4dvar", *common, "--set", "ens.size = 6", "--out", str(tmp_path / "en")])
    cli.main(["metrics", str(tmp_path / "en")])
    cli.main(["verify-adjoint", *common, "--steps", "2"])
    out = capsys.readouterr().out
    assert "time-mean RMSE" in out and "epsilon,residual" in out
    rows = [l for l in out.splitlines() if l.startswith(str(tmp_path / "en"))]
    assert len(rows) == 1
    with pytest.raises(SystemExit):
        cli.main(["nonsense"])
    with pytest.raises(ValueError):
        cli.main(["assim-4dvar", "--set", "bogus = 1"])
