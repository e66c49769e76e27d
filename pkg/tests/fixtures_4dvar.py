"""Small twin problems for 4DVar tests (imports the adjoint model)."""
import numpy as np

from dakit.observations import ObservationSet, mask_from_name, observe
from dakit.swe import GridSpec, StateField, integrate, stable_dt
from dakit.var4d import BackgroundModel, make_swe_problem

from conftest import tilted_state


def twin_problem(nx=5, ny=5, mask="full", tf=0.04, n_obs=3, seed=0, noise=True):
    grid = GridSpec.from_extent(nx, ny, 0.01 * nx, 0.01 * ny)
    bg0 = tilted_state(grid, noise=0.0)
    # truth drawn from the background distribution: sigma_h = 1e-3 m, sigma_u = 1e-3 m/s
    z = np.random.default_rng(seed).standard_normal((3,) + grid.shape)
    h = bg0.h + 1e-3 * z[0]
    truth0 = StateField(h, h * 1e-3 * z[1], h * 1e-3 * z[2])
    dt = stable_dt(truth0, grid, 0.5)
    times = np.linspace(tf / n_obs, tf, n_obs)
    traj = integrate(truth0, grid, 0.0, tf, record_times=np.concatenate([[0.0], times]), dt=dt)
    m = mask_from_name(mask, len(times), grid.shape)
    vals = np.stack([observe(traj.state_at(t).as_array()) for t in times])
    var = np.where(m, np.array([1e-3, 1e-3, 1e-3])[None, :, None, None] ** 2, 1.0)
    if noise:
        vals = vals + np.random.default_rng(seed + 99).standard_normal(vals.shape) * np.sqrt(var)
    obs = ObservationSet(times, m, np.where(m, vals, 0.0), var)
    bg = BackgroundModel.from_sigmas(bg0, 1e-3, 1e-3)
    return make_swe_problem(grid, bg, obs, 0.0, tf, dt), grid, truth0
