"""Twin experiments: truth and background construction, synthetic
observations, RMSE metrics and the end-to-end experiment driver."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from .. import en4dvar
from ..observations import ObservationSet, mask_from_name, observe
from ..stochastics import (GrfSpec, SeededRng, balance_ensemble, make_ensemble_gauss,
                           make_ensemble_para, perturb_observations, perturb_state, planar_surface,
                           recenter)
from ..swe import GridSpec, StateField, integrate, stable_dt, step, write_swf
from .config import ExperimentConfig, format_config

log = logging.getLogger(__name__)

# independent random streams of one experiment
STREAM_TRUTH, STREAM_OBS, STREAM_ENSEMBLE, STREAM_UPDATE = 1, 2, 3, 4


class StageError(RuntimeError):
    """Failure of one experiment stage, tagged with the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def make_grid(cfg):
    return GridSpec.from_extent(cfg.grid_nx, cfg.grid_ny, cfg.grid_lx, cfg.grid_ly, cfg.gravity)


def build_case(cfg, grid=None):
    """(truth, background) initial states of the configured twin case.

    The background is the ideal x-tilted plane at rest. The truth is a plane
    with the case slopes plus a height GRF, with GRF initial velocities. Both
    are states at the start of the balancing interval (see spin_up).
    """
    grid = grid or make_grid(cfg)
    sx, sy, var_h = cfg.truth_parameters()
    zero = np.zeros(grid.shape)
    background = StateField(planar_surface(grid, cfg.depth, cfg.bg_x_slope, 0.0), zero, zero.copy())
    plane = StateField(planar_surface(grid, cfg.depth, sx, sy), zero, zero.copy())
    specs = [GrfSpec(var_h, cfg.truth_corr_len, "h"),
             GrfSpec(cfg.truth_sigma_u ** 2, cfg.truth_corr_len, "u"),
             GrfSpec(cfg.truth_sigma_u ** 2, cfg.truth_corr_len, "v")]
    truth = perturb_state(plane, grid, specs, SeededRng(cfg.seed, STREAM_TRUTH))
    return truth, background


def make_observations(truth_traj, times, mask, sigmas, rng):
    """Noisy observations of (h, u, v) at the given record times of truth_traj.

    mask: (T, 3, nx, ny) bool; sigmas: (sigma_h, sigma_u, sigma_v) or an
    array of standard deviations shaped like mask.
    """
    vals = np.stack([observe(truth_traj.state_at(t).as_array()) for t in times])
    sig = np.asarray(sigmas, dtype=float)
    if sig.ndim == 1:
        sig = np.broadcast_to(sig[None, :, None, None], vals.shape)
    var = np.where(mask, np.square(sig), 1.0)
    clean = ObservationSet(times, mask, np.where(mask, vals, 0.0), var)
    return perturb_observations(clean, rng)


def inflate_missing_obs_error(valid, sigma_o, growth):
    """Variance field growing with the grid distance d to the nearest valid point.

    Valid points get sigma_o^2, the others (sigma_o (1 + growth d))^2.
    """
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("at least one valid observation point is required")
    d = distance_transform_edt(~valid)
    return (sigma_o * (1.0 + growth * d)) ** 2


@dataclass
class RmseSeries:
    times: np.ndarray
    h: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def time_mean(self):
        return {"h": float(self.h.mean()), "u": float(self.u.mean()), "v": float(self.v.mean()),
                "velocity": float(np.sqrt(0.5 * (self.u ** 2 + self.v ** 2)).mean())}


def rmse(est_states, truth_states, times):
    """RMSE of h, u = hu/h and v = hv/h at each time; states are StateField lists."""
    if len(est_states) != len(truth_states) or len(est_states) != len(times):
        raise ValueError("estimate, truth and times must be aligned")
    out = np.zeros((3, len(times)))
    for k, (e, t) in enumerate(zip(est_states, truth_states)):
        diff = observe(e.as_array()) - observe(t.as_array())
        out[:, k] = np.sqrt(np.mean(diff.reshape(3, -1) ** 2, axis=1))
    return RmseSeries(np.asarray(times, dtype=float), *out)


def rmse_traj(est_traj, truth_traj, times=None):
    """RMSE between two trajectories at shared record times."""
    times = est_traj.times if times is None else times
    for t in times:
        if not np.any(np.abs(truth_traj.times - t) <= 1e-12):
            raise KeyError(f"time {t} is missing from the truth trajectory")
    return rmse([est_traj.state_at(t) for t in times], [truth_traj.state_at(t) for t in times], times)


# -- experiment driver --------------------------------------------------------

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rmse: RmseSeries
    background_rmse: RmseSeries
    cost_rows: list
    analyses: list
    meta: dict = field(default_factory=dict)
    output_dir: Path | None = None


def _sigma_auto(value, diff):
    return float(np.sqrt(np.mean(diff ** 2))) if value == "auto" else float(value)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(name, exc) from exc


def spin_up(state, grid, n_steps, dt):
    """Advance n_steps model steps: the balancing interval that precedes the window."""
    for _ in range(n_steps):
        state = step(state, grid, dt)
    return state


def setup_twin(cfg):
    """Grid, truth and background at the window start, unbalanced background,
    truth trajectory, observations and model time step."""
    grid = make_grid(cfg)
    truth_raw, bg_raw = build_case(cfg, grid)
    dt = stable_dt(bg_raw, grid, cfg.model_cfl)
    truth0 = spin_up(truth_raw, grid, cfg.ens_balance_steps, dt)
    bg0 = spin_up(bg_raw, grid, cfg.ens_balance_steps, dt)
    times = np.asarray(cfg.obs_times())
    t_end = float(times[-1])
    record = np.unique(np.concatenate([[cfg.window_t0], times]))
    truth = integrate(truth0, grid, cfg.window_t0, t_end, record_times=record, dt=dt)
    mask = mask_from_name(cfg.obs_mask, len(times), grid.shape)
    obs = make_observations(truth, times, mask, (cfg.obs_sigma_h, cfg.obs_sigma_u, cfg.obs_sigma_u),
                            SeededRng(cfg.seed, STREAM_OBS))
    return grid, truth0, bg0, bg_raw, truth, obs, dt


def _run_4dvar(cfg, grid, truth0, bg0, obs, dt, windows):
    from .. import var4d  # kept local so that ensemble runs never import the adjoint model

    sigma_h = _sigma_auto(cfg.bg_sigma_h, truth0.h - bg0.h)
    du = np.asarray(truth0.velocity()) - np.asarray(bg0.velocity())
    sigma_u = _sigma_auto(cfg.bg_sigma_u, du)
    x = bg0
    analyses, cost_rows = [], []
    t_prev = cfg.window_t0
    for w, (t0, tf, idx) in enumerate(windows):
        if t0 > t_prev:
            x = integrate(x, grid, t_prev, t0, dt=dt).states[-1]
        t_prev = t0
        sub = _subset_obs(obs, idx)
        bg = var4d.BackgroundModel.from_sigmas(x, sigma_h, sigma_u)
        problem = var4d.make_swe_problem(grid, bg, sub, t0, tf, dt)
        if cfg.method == "4dvar-full":
            res = var4d.run_4dvar_full(problem, max_iter=cfg.inner_iters, tol=cfg.inner_tol)
        else:
            res = var4d.run_4dvar(problem, outer_iters=cfg.outer_iters, inner_iters=cfg.inner_iters,
                                  inner_tol=cfg.inner_tol)
        for it, rep in enumerate(res.reports):
            cost_rows.append((w, it, rep.total, rep.background, rep.observation, rep.grad_norm))
        x = StateField.from_vector(res.analysis, grid.shape)
        analyses.append((t0, x, res.diverged))
    return analyses, cost_rows, {"sigma_b_h": sigma_h, "sigma_b_u": sigma_u}


def _subset_obs(obs, idx):
    return ObservationSet(obs.times[idx], obs.mask[idx], obs.values[idx], obs.variances[idx])


def initial_ensemble(cfg, grid, bg_raw, bg0, dt):
    """Initial members drawn around the unbalanced background bg_raw, advanced
    through the balancing interval and re-centered on the balanced background bg0."""
    rng = SeededRng(cfg.seed, STREAM_ENSEMBLE)
    if cfg.ens_init == "gauss":
        specs = [GrfSpec(cfg.ens_init_variance_h, cfg.ens_init_corr_len, "h"),
                 GrfSpec(cfg.ens_init_sigma_u ** 2, cfg.ens_init_corr_len, "u"),
                 GrfSpec(cfg.ens_init_sigma_u ** 2, cfg.ens_init_corr_len, "v")]
        members = make_ensemble_gauss(bg_raw, grid, cfg.ens_size, specs, rng)
    else:
        members = make_ensemble_para(bg_raw, grid, cfg.ens_size, rng, cfg.ens_para_x_range,
                                     cfg.ens_para_y_range)
    members = balance_ensemble(members, grid, cfg.ens_balance_steps, dt)
    return recenter(members, bg0)


def _run_en4dvar(cfg, grid, bg_raw, bg0, obs, dt, windows):
    members = initial_ensemble(cfg, grid, bg_raw, bg0, dt)
    meta = {}
    loc = None
    if cfg.loc_enabled:
        loc = en4dvar.build_localization(grid, cfg.loc_kind, cfg.loc_cutoff, energy=cfg.loc_energy)
        meta.update(loc_rank=loc.rank, loc_retained_energy=loc.retained_energy,
                    loc_clipped=loc.clipped)
    settings = en4dvar.EnVarSettings(localization=loc, outer_iters=cfg.outer_iters,
                                     inner_iters=cfg.inner_iters, inner_tol=cfg.inner_tol,
                                     update=cfg.cycle_update,
                                     seed=int(SeededRng(cfg.seed, STREAM_UPDATE).generator()
                                              .integers(2 ** 63)),
                                     workers=cfg.workers)
    cyc = en4dvar.run_en4dvar_cycle(bg0, members, grid, obs, windows, dt, settings)
    analyses, cost_rows = [], []
    for w, res in enumerate(cyc.windows):
        analyses.append((res.t0, res.analysis, res.diverged))
        for it, j in enumerate(res.cost_history):
            cost_rows.append((w, it, j, float("nan"), float("nan"), float("nan")))
    return analyses, cost_rows, meta


def _analysis_states(cfg, grid, analyses, windows, dt, times):
    """Estimated states at every observation time.

    Each observation time takes the forecast of the analysis of the last
    window starting at or before it; the final window covers the rest.
    """
    owner = [max(i for i, (t0, _, _) in enumerate(windows) if t0 <= t + 1e-12) for t in times]
    out = []
    for k, (t0, x, _) in enumerate(analyses):
        mine = [t for t, o in zip(times, owner) if o == k]
        if not mine:
            continue
        traj = integrate(x, grid, t0, float(mine[-1]),
                         record_times=np.unique(np.concatenate([[t0], mine])), dt=dt)
        out.extend(traj.state_at(t) for t in mine)
    return out


def run_experiment(cfg, output=None):
    """Run a twin experiment and optionally write its outputs under `output`.

    Writes rmse.csv, cost.csv, background_rmse.csv, SWF1 snapshots of the truth
    and of each window analysis, and manifest.json / manifest.cfg.
    """
    t_start = time.perf_counter()
    grid, truth0, bg0, bg_raw, truth, obs, dt = _stage("setup", setup_twin, cfg)
    times = obs.times
    windows = en4dvar.sliding_windows(times, cfg.window_n_obs, cfg.cycle_windows)
    meta = {"dt": dt, "n_obs_values": obs.count()}
    if cfg.method == "none":
        analyses, cost_rows = [(cfg.window_t0, bg0, False)], []
        windows = windows[:1]
    elif cfg.method in ("4dvar", "4dvar-full"):
        analyses, cost_rows, extra = _stage("assimilation", _run_4dvar, cfg, grid, truth0, bg0, obs,
                                            dt, windows)
        meta.update(extra)
    else:
        analyses, cost_rows, extra = _stage("assimilation", _run_en4dvar, cfg, grid, bg_raw, bg0, obs, dt,
                                            windows)
        meta.update(extra)
    meta["stopped_early_windows"] = [i for i, a in enumerate(analyses) if a[2]]
    est = _stage("metrics", _analysis_states, cfg, grid, analyses, windows, dt, times)
    truth_states = [truth.state_at(t) for t in times]
    series = rmse(est, truth_states, times)
    free = integrate(bg0, grid, cfg.window_t0, float(times[-1]),
                     record_times=np.unique(np.concatenate([[cfg.window_t0], times])), dt=dt)
    bg_series = rmse_traj(free, truth, times)
    meta["time_mean_rmse"] = series.time_mean()
    meta["time_mean_rmse_background"] = bg_series.time_mean()
    meta["elapsed_s"] = time.perf_counter() - t_start
    result = ExperimentResult(cfg, series, bg_series, cost_rows, analyses, meta)
    if output is not None:
        _stage("output", write_outputs, result, Path(output), grid, truth0)
        result.output_dir = Path(output)
    return result


def _write_rmse(path, series):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "rmse_h", "rmse_u", "rmse_v"])
        for row in zip(series.times, series.h, series.u, series.v):
            w.writerow([repr(float(x)) for x in row])


def write_outputs(result, out, grid, truth0):
    out.mkdir(parents=True, exist_ok=True)
    _write_rmse(out / "rmse.csv", result.rmse)
    _write_rmse(out / "background_rmse.csv", result.background_rmse)
    with open(out / "cost.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "iter", "J_total", "J_bg", "J_obs", "grad_norm"])
        for row in result.cost_rows:
            w.writerow([row[0], row[1]] + [repr(float(x)) for x in row[2:]])
    write_swf(out / "truth_t0.swf", truth0, grid)
    for k, (t0, x, _) in enumerate(result.analyses):
        write_swf(out / f"analysis_w{k}.swf", x, grid)
    (out / "manifest.cfg").write_text(format_config(result.config))
    digests = {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
               for p in sorted(out.glob("*.csv"))}
    meta = {k: v for k, v in result.meta.items() if k != "elapsed_s"}
    manifest = {"config": dataclasses.asdict(result.config), "derived": meta,
                "elapsed_s": result.meta.get("elapsed_s"), "sha256": digests}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=list))


# -- localization cutoff sweep ------------------------------------------------

DEFAULT_CUTOFFS = (0.02, 0.03, 0.05, 0.07, 0.10, 0.125)


@dataclass
class SweepResult:
    reference: dict  # time-mean RMSE of the unlocalized run
    rows: list  # (cutoff, rank, retained energy, rmse_h, rmse_velocity, score)
    best: tuple

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cutoff", "rank", "retained_energy", "rmse_h", "rmse_velocity", "score"])
            w.writerow(["none", "", "", repr(self.reference["h"]), repr(self.reference["velocity"]), "2.0"])
            for row in self.rows:
                w.writerow([repr(float(x)) if isinstance(x, float) else x for x in row])


def sweep_cutoff(cfg, cutoffs=DEFAULT_CUTOFFS):
    """Run En4DVar unlocalized and at each cutoff.

    The optimum minimizes the score rmse_h / ref_h + rmse_vel / ref_vel, both
    time means normalized by the unlocalized run (which therefore scores 2).
    """
    base = cfg.replace(method="en4dvar", loc_enabled=False)
    ref = run_experiment(base).meta["time_mean_rmse"]
    rows = []
    for L in cutoffs:
        r = run_experiment(base.replace(loc_enabled=True, loc_cutoff=float(L)))
        m = r.meta["time_mean_rmse"]
        score = m["h"] / ref["h"] + m["velocity"] / ref["velocity"]
        rows.append((float(L), r.meta["loc_rank"], r.meta["loc_retained_energy"], m["h"],
                     m["velocity"], score))
    best = min(rows, key=lambda row: row[-1])
    return SweepResult(ref, rows, best)
