import sys
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dakit.swe import GridSpec, StateField

settings.register_profile("dakit", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dakit")  # `pytest --hypothesis-profile=thorough` for longer searches


def tilted_state(grid, depth=0.035, sx=0.2, sy=0.0, noise=0.0, seed=0):
    x, y = grid.centers()
    rng = np.random.default_rng(seed)
    h = depth + sx * (x - 0.5 * grid.lx) + sy * (y - 0.5 * grid.ly)
    h = h + noise * rng.standard_normal(grid.shape)
    hu = noise * 0.5 * rng.standard_normal(grid.shape)
    hv = noise * 0.5 * rng.standard_normal(grid.shape)
    return StateField(h, hu, hv)


@pytest.fixture
def small_grid():
    return GridSpec.from_extent(5, 6, 0.05, 0.06)


@pytest.fixture
def tank_grid():
    return GridSpec.from_extent(11, 26, 0.10, 0.25)


@pytest.fixture
def small_state(small_grid):
    return tilted_state(small_grid, noise=1e-3)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
