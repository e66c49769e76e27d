"""Experiment configuration and its key = value text format.

One setting per line, `key = value`; `#` starts a comment. Keys are dotted
(window.tf, loc.cutoff, ...) and map onto ExperimentConfig fields with the
dots replaced by underscores. Ranges are written as two numbers separated
by a comma. `auto` is accepted where a field documents it.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

CASES = ("A", "B", "custom")
METHODS = ("none", "4dvar", "4dvar-full", "en4dvar")
# x slope, y slope, GRF height variance (m^2) of the true initial surface
CASE_TRUTH = {"A": (0.20, 0.0, 1.6e-6), "B": (0.21, 0.10, 0.0)}
# field-name fragments that stay joined when forming dotted keys
_JOINED = ("sigma_h", "sigma_u", "variance_h", "corr_len", "x_range", "y_range", "x_slope",
           "y_slope", "n_obs", "balance_steps")


@dataclass
class ExperimentConfig:
    case: str = "A"
    method: str = "4dvar"
    seed: int = 0
    output: str = "runs/default"

    # tank and model
    grid_nx: int = 11
    grid_ny: int = 26
    grid_lx: float = 0.10
    grid_ly: float = 0.25
    depth: float = 0.035
    gravity: float = 9.81
    model_cfl: float = 0.5

    # truth and background; auto takes the value of the chosen case
    bg_x_slope: float = 0.20
    truth_x_slope: float | str = "auto"
    truth_y_slope: float | str = "auto"
    truth_variance_h: float | str = "auto"
    truth_sigma_u: float = 1e-3
    truth_corr_len: float = 0.05

    # observations
    window_t0: float = 0.0
    window_tf: float = 0.2
    window_n_obs: int = 5
    obs_mask: str = "velocity"
    obs_sigma_h: float = 1e-3
    obs_sigma_u: float = 1e-3

    # 4DVar; auto means the truth-minus-background standard deviation
    bg_sigma_h: float | str = "auto"
    bg_sigma_u: float | str = "auto"
    outer_iters: int = 3
    inner_iters: int = 50
    inner_tol: float = 1e-4

    # ensemble
    ens_size: int = 16
    ens_init: str = "gauss"
    ens_init_variance_h: float = 1.6e-6
    ens_init_sigma_u: float = 1e-3
    ens_init_corr_len: float = 0.05
    ens_para_x_range: tuple = (0.15, 0.25)
    ens_para_y_range: tuple = (-0.10, 0.10)
    ens_balance_steps: int = 5
    loc_enabled: bool = False
    loc_kind: str = "gaussian"
    loc_cutoff: float = 0.0125
    loc_energy: float = 0.99
    cycle_windows: int = 1
    cycle_update: str = "enkf"
    workers: int = 1

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"case must be one of {CASES}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not self.window_tf > self.window_t0:
            raise ValueError("window.tf must exceed window.t0")
        if self.window_n_obs < 1 or self.cycle_windows < 1:
            raise ValueError("window.n_obs and cycle.windows must be positive")
        if self.ens_init not in ("gauss", "para"):
            raise ValueError("ens.init must be gauss or para")
        if self.cycle_update not in ("enkf", "etkf"):
            raise ValueError("cycle.update must be enkf or etkf")

    def truth_parameters(self):
        """(x slope, y slope, h variance) of the truth after resolving auto."""
        case = CASE_TRUTH.get(self.case, CASE_TRUTH["A"])
        given = (self.truth_x_slope, self.truth_y_slope, self.truth_variance_h)
        return tuple(c if g == "auto" else float(g) for g, c in zip(given, case))

    def obs_times(self):
        """All observation instants: window.n_obs per window, sliding by one."""
        n = self.window_n_obs + self.cycle_windows - 1
        dt_obs = (self.window_tf - self.window_t0) / max(self.window_n_obs - 1, 1)
        return [self.window_t0 + k * dt_obs for k in range(n)]

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def config_key(name):
    """Dotted key of a field name, e.g. ens_init_variance_h -> ens.init.variance_h."""
    key = name.replace("_", ".")
    for frag in _JOINED:
        key = key.replace(frag.replace("_", "."), frag)
    return key


def _parse_value(name, text):
    default = _FIELDS[name].default
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, tuple):
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 2:
            raise ValueError(f"{name}: expected two comma-separated numbers")
        return tuple(parts)
    if isinstance(default, float):
        return float(text)
    if default == "auto":
        return text if text == "auto" else float(text)
    return text


def parse_config(text, base=None):
    """ExperimentConfig from key = value text, starting from base or the defaults."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        name = key.replace(".", "_")
        if name not in _FIELDS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[name] = _parse_value(name, val)
    return dataclasses.replace(base or ExperimentConfig(), **values)


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} does not exist")
    return parse_config(path.read_text())


def format_config(cfg):
    """Inverse of parse_config: every field, one per line, in declaration order."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(float(x)) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{config_key(f.name)} = {v}")
    return "\n".join(lines) + "\n"
