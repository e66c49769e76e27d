"""The ensemble method must work with the adjoint model compiled out."""
import os
import subprocess
import sys
from pathlib import Path

HERE = Path(__file__).parent


def _run(code_or_args, env_extra):
    env = dict(os.environ, **env_extra)
    return subprocess.run([sys.executable] + code_or_args, cwd=HERE.parent, env=env,
                          capture_output=True, text=True, timeout=600)


def test_en4dvar_suite_passes_without_adjoint():
    proc = _run(["-m", "pytest", "-q", "-p", "no:cacheprovider", str(HERE / "test_en4dvar.py")],
                {"DAKIT_NO_ADJOINT": "1"})
    assert proc.returncode == 0, proc.stdout[-3000:] + proc.stderr[-3000:]
    assert " passed" in proc.stdout


def test_en4dvar_experiment_runs_without_adjoint(tmp_path):
    code = ("import sys; from dakit.harness.config import ExperimentConfig;"
            "from dakit.harness.twin import run_experiment;"
            "cfg = ExperimentConfig(method='en4dvar', ens_size=6, window_tf=0.05, window_n_obs=3);"
            "r = run_experiment(cfg);"
            "assert 'dakit.linearized' not in sys.modules;"
            "print(r.meta['time_mean_rmse']['h'])")
    proc = _run(["-c", code], {"DAKIT_NO_ADJOINT": "1"})
    assert proc.returncode == 0, proc.stderr[-3000:]
    proc = _run(["-c", "import dakit.linearized"], {"DAKIT_NO_ADJOINT": "1"})
    assert proc.returncode != 0 and "ImportError" in proc.stderr
