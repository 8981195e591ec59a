"""Run the ablation sweeps (cluster count, cluster choice, level combos, anchor strategy).

    python scripts/run_ablations.py --axes k cluster_choice --seeds 0 1 2 --out runs/ablate

Each axis gets its own directory with a per-arm CSV averaged over seeds.
"""
import argparse
import logging
from pathlib import Path

from cutswap.cli import AXES
from cutswap.config import load_config
from cutswap.pipeline import run_ablation, summarize_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--axes", nargs="+", choices=AXES, default=list(AXES))
    ap.add_argument("--seeds", nargs="+", type=int, default=[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    ap.add_argument("--out", type=Path, default=Path("runs/ablations"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    seeds = "[" + ",".join(map(str, args.seeds)) + "]"
    cfg = load_config(args.config, [*args.overrides, f"ablate.seeds={seeds}"])
    for axis in args.axes:
        report = run_ablation(cfg, axis, args.out / axis)
        print(f"\n== {axis} ({len(args.seeds)} seeds, {report.timings['total']:.0f}s)")
        for r in summarize_ablation(report):
            print(f"  {r['arm']:>22s}  image {r['image_auc']:.4f}  pixel {r['pixel_auc']:.4f}")
        for r in report.rows:
            if "error" in r:
                print(f"  {r['arm']:>22s}  seed {r['seed']} failed: {r['error']}")


if __name__ == "__main__":
    main()
