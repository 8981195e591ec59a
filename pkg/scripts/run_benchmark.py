"""Desk-scale functional benchmark: synthesize, train, bank, score, evaluate.

    python scripts/run_benchmark.py --out runs/bench --set train.epochs=8

Prints the metrics rows and per-stage timings.
"""
import argparse
import logging
from pathlib import Path

from cutswap.config import load_config, to_dict
from cutswap.pipeline import ExperimentReport, run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", type=Path, default=Path("runs/benchmark"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config, args.overrides, args.seed)
    report = ExperimentReport(config=to_dict(cfg))
    rows = run_pipeline(cfg, args.out, report)
    for r in rows:
        print(f"{r.category:12s} ratio={r.coreset_ratio:<6g} image_auc={r.image_auc:.4f} "
              f"pixel_auc={r.pixel_auc:.4f} n_test={r.n_test}")
    for stage, secs in report.timings.items():
        print(f"  {stage:>12s} {secs:7.1f}s")


if __name__ == "__main__":
    main()
