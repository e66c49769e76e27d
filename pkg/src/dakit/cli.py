"""Command-line entry point: `dakit <command> [options]`."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .harness.config import ExperimentConfig, format_config, load_config, parse_config


def _config(args, **forced):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.set:
        cfg = parse_config("\n".join(args.set), base=cfg)
    if forced:
        cfg = cfg.replace(**forced)
    if getattr(args, "out", None):
        cfg = cfg.replace(output=str(args.out))
    return cfg


def _print_summary(result):
    m = result.meta["time_mean_rmse"]
    b = result.meta["time_mean_rmse_background"]
    print(f"time-mean RMSE  h={m['h']:.4e}  u={m['u']:.4e}  v={m['v']:.4e}")
    print(f"free run        h={b['h']:.4e}  u={b['u']:.4e}  v={b['v']:.4e}")
    if result.meta.get("stopped_early_windows"):
        print("outer loop stopped on a rejected cost increase in windows "
              f"{result.meta['stopped_early_windows']}")
    if result.output_dir is not None:
        print(f"outputs written to {result.output_dir}")


def cmd_simulate(args):
    from .harness.twin import setup_twin
    from .swe import integrate, write_state_csv, write_swf

    cfg = _config(args)
    grid, truth0, bg0, _, _, _, dt = setup_twin(cfg)
    state = truth0 if args.which == "truth" else bg0
    tf = cfg.window_t0 + args.duration
    times = np.linspace(cfg.window_t0, tf, args.snapshots)
    traj = integrate(state, grid, cfg.window_t0, tf, record_times=times, dt=dt)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    for k, (t, s) in enumerate(zip(traj.times, traj.states)):
        write_swf(out / f"{args.which}_{k:03d}.swf", s, grid)
        if args.csv:
            write_state_csv(out / f"{args.which}_{k:03d}.csv", s, grid)
    mass = [s.mass(grid) for s in traj.states]
    print(f"{len(traj.states)} snapshots, relative mass drift {abs(mass[-1] - mass[0]) / mass[0]:.2e}")


def cmd_twin_gen(args):
    from .harness.twin import setup_twin
    from .observations import COMPONENTS
    from .swe import write_swf

    cfg = _config(args)
    grid, truth0, bg0, _, truth, obs, _ = setup_twin(cfg)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    write_swf(out / "truth_t0.swf", truth0, grid)
    write_swf(out / "background_t0.swf", bg0, grid)
    with open(out / "observations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "variable", "i", "j", "value", "variance"])
        for k, t in enumerate(obs.times):
            for c, name in enumerate(COMPONENTS):
                for i, j in zip(*np.nonzero(obs.mask[k, c])):
                    w.writerow([repr(float(t)), name, i, j, repr(float(obs.values[k, c, i, j])),
                                repr(float(obs.variances[k, c, i, j]))])
    (out / "manifest.cfg").write_text(format_config(cfg))
    print(f"{obs.count()} observations at {len(obs)} times written to {out}")


def _assimilate(args, method):
    from .harness.twin import run_experiment

    cfg = _config(args, method=method)
    result = run_experiment(cfg, output=cfg.output)
    _print_summary(result)


def cmd_verify_adjoint(args):
    from . import linearized
    from .harness.twin import setup_twin
    from .swe import integrate

    cfg = _config(args)
    grid, truth0, _, _, _, _, dt = setup_twin(cfg)
    traj = integrate(truth0, grid, cfg.window_t0, cfg.window_tf, dt=dt)
    cp = traj.step_checkpoints[0]
    step_res = max(linearized.dot_product_step(c.state, grid, c.dt, rng=k)
                   for k, c in enumerate(traj.step_checkpoints[:args.steps]))
    win_res = linearized.dot_product_window(traj, rng=args.seed)
    print(f"# dot-product relative residual: worst substep {step_res:.3e}, window {win_res:.3e}")
    gen = np.random.default_rng(args.seed)
    scale = np.array([1e-3, cp.state[0].mean() * 1e-3, cp.state[0].mean() * 1e-3])
    d0 = gen.standard_normal(cp.state.shape) * scale[:, None, None]
    eps = [10.0 ** (-k) for k in range(1, 7)]
    w = csv.writer(sys.stdout)
    w.writerow(["epsilon", "residual"])
    for e, r in linearized.taylor_test(truth0, grid, cfg.window_t0, cfg.window_tf, d0, eps, dt):
        w.writerow([f"{e:.1e}", f"{r:.6e}"])


def cmd_metrics(args):
    w = csv.writer(sys.stdout)
    w.writerow(["run", "rmse_h", "rmse_u", "rmse_v"])
    for run in args.runs:
        path = Path(run)
        path = path / "rmse.csv" if path.is_dir() else path
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        means = data[:, 1:].mean(axis=0)
        w.writerow([str(run)] + [f"{m:.6e}" for m in means])


def cmd_sweep_cutoff(args):
    from .harness.twin import sweep_cutoff

    cfg = _config(args)
    res = sweep_cutoff(cfg, [float(c) for c in args.cutoffs.split(",")])
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    res.write_csv(out / "sweep.csv")
    print(f"unlocalized: h={res.reference['h']:.4e} velocity={res.reference['velocity']:.4e}")
    for L, r, e, h, v, s in res.rows:
        print(f"L={L:.4f} r={r:4d} energy={e:.3f} h={h:.4e} velocity={v:.4e} score={s:.3f}")
    print(f"optimal cutoff {res.best[0]}")


def build_parser():
    p = argparse.ArgumentParser(prog="dakit", description="Shallow-water twin experiments with "
                                "incremental 4DVar and ensemble 4DVar.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", nargs="?", help="key = value config file (a manifest.cfg works)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", help="output directory (config key: output)")
        return sp

    sp = common(sub.add_parser("simulate", help="integrate the truth or background and write snapshots"))
    sp.add_argument("--which", choices=("truth", "background"), default="truth")
    sp.add_argument("--duration", type=float, default=0.2)
    sp.add_argument("--snapshots", type=int, default=5)
    sp.add_argument("--csv", action="store_true", help="also write x, y, h, hu, hv CSV files")
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("twin-gen", help="write the truth, background and observations"))
    sp.set_defaults(func=cmd_twin_gen)

    sp = common(sub.add_parser("assim-4dvar", help="incremental 4DVar twin experiment"))
    sp.set_defaults(func=lambda a: _assimilate(a, "4dvar"))

    sp = common(sub.add_parser("assim-en4dvar", help="ensemble 4DVar twin experiment"))
    sp.set_defaults(func=lambda a: _assimilate(a, "en4dvar"))

    sp = common(sub.add_parser("verify-adjoint", help="dot-product and Taylor tests as CSV"))
    sp.add_argument("--steps", type=int, default=5, help="substeps checked individually")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_verify_adjoint)

    sp = sub.add_parser("metrics", help="time-mean RMSE of finished runs")
    sp.add_argument("runs", nargs="+", help="run directories or rmse.csv files")
    sp.set_defaults(func=cmd_metrics)

    sp = common(sub.add_parser("sweep-cutoff", help="En4DVar localization cutoff sweep"))
    sp.add_argument("--cutoffs", default="0.02,0.03,0.05,0.07,0.1,0.125")
    sp.set_defaults(func=cmd_sweep_cutoff)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
