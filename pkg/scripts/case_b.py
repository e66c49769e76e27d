"""Case B twin: wrong slopes, height-only observations.

Compares incremental 4DVar with En4DVar started from the slope ("para") and
the Gaussian random-field ("gauss") ensembles, with and without localization.

usage: python3 scripts/case_b.py [--out runs/case_b]
"""
import argparse
from pathlib import Path

from dakit.harness.config import load_config
from dakit.harness.twin import run_experiment

HERE = Path(__file__).resolve().parent

RUNS = {
    "4dvar": dict(method="4dvar"),
    "en4dvar-para": dict(method="en4dvar", ens_init="para"),
    "en4dvar-gauss": dict(method="en4dvar", ens_init="gauss"),
    "en4dvar-gauss-loc": dict(method="en4dvar", ens_init="gauss", loc_enabled=True, loc_cutoff=0.05),
}


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=HERE / "configs" / "case_b_para.cfg")
    p.add_argument("--out", default="runs/case_b")
    args = p.parse_args()
    base = load_config(args.config)
    print("run,rmse_h,rmse_u,rmse_v,rmse_velocity")
    for name, kw in RUNS.items():
        r = run_experiment(base.replace(**kw), output=Path(args.out) / name)
        m = r.meta["time_mean_rmse"]
        print(f"{name},{m['h']:.4e},{m['u']:.4e},{m['v']:.4e},{m['velocity']:.4e}")


if __name__ == "__main__":
    main()
