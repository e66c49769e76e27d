"""Localization cutoff sweep for En4DVar on the fine grid with N = 8.

usage: python3 scripts/cutoff_sweep.py [--kind gaussian|gaspari-cohn] [--out runs/sweep]
"""
import argparse
from pathlib import Path

from dakit.harness.config import load_config
from dakit.harness.twin import DEFAULT_CUTOFFS, sweep_cutoff

HERE = Path(__file__).resolve().parent


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=HERE / "configs" / "case_a_fine.cfg")
    p.add_argument("--kind", default=None)
    p.add_argument("--cutoffs", type=float, nargs="+", default=list(DEFAULT_CUTOFFS))
    p.add_argument("--out", default="runs/sweep")
    args = p.parse_args()
    cfg = load_config(args.config)
    if args.kind:
        cfg = cfg.replace(loc_kind=args.kind)
    res = sweep_cutoff(cfg, args.cutoffs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.write_csv(out / "sweep.csv")
    print(f"unlocalized h={res.reference['h']:.4e} velocity={res.reference['velocity']:.4e}")
    for L, r, e, h, v, s in res.rows:
        print(f"L={L:.4f} rank={r} energy={e:.3f} h={h:.4e} velocity={v:.4e} score={s:.3f}")
    print(f"optimal cutoff {res.best[0]} -> {out / 'sweep.csv'}")


if __name__ == "__main__":
    main()
