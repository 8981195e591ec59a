"""``cutswap`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from . import pipeline as P
from .config import ConfigError, RunConfig, load_config, save_config, to_dict
from .dataset import DatasetError, TestItem
from .encoder import CheckpointError, TrainingDiverged
from .memorybank import BankError, load_bank, save_bank

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
AXES = ("k", "cluster_choice", "level_combo", "anchor_strategy")


def cmd_synth(cfg: RunConfig, out: Path, args) -> None:
    index = P.synthesize(cfg, out)
    print(f"wrote {len(index.train_normals)} train / {len(index.test_items)} test images to {index.root}")


def cmd_augment(cfg: RunConfig, out: Path, args) -> None:
    index = P.open_dataset(cfg, out)
    print(f"manifest: {P.run_augment(cfg, index, out, args.epoch)}")


def cmd_train(cfg: RunConfig, out: Path, args) -> None:
    index = P.open_dataset(cfg, out)
    _, _, curve = P.run_train(cfg, index, out)
    print(f"checkpoint: {P.Paths(out).checkpoint} (loss {curve[0]:.4f} -> {curve[-1]:.4f})")


def cmd_build_bank(cfg: RunConfig, out: Path, args) -> None:
    index = P.open_dataset(cfg, out)
    enc, head = P.load_model(out)
    ratio = cfg.bank.coreset_ratio
    bank = P.run_build_bank(cfg, index, enc, head, ratio)
    path = P.Paths(out).bank(ratio)
    save_bank(bank, path)
    print(f"bank: {path} ({len(bank)} vectors)")


def _open_bank(cfg: RunConfig, out: Path, ratio: float, model):
    path = P.Paths(out).bank(ratio)
    if not path.is_file():
        raise P.MissingArtifact(f"no memory bank at {path} (run `build-bank` first)")
    return load_bank(path, model)


def cmd_score(cfg: RunConfig, out: Path, args) -> None:
    index = P.open_dataset(cfg, out)
    enc, head = P.load_model(out)
    ratio = cfg.bank.coreset_ratio
    bank = _open_bank(cfg, out, ratio, (enc, head))
    items = None
    if args.image:
        for p in args.image:
            if not Path(p).is_file():
                raise P.MissingArtifact(f"no image at {p}")
        items = [TestItem(Path(p), label=0, mask_path=None, defect="query") for p in args.image]
    scored = P.run_score(cfg, index, enc, bank, items)
    paths = P.Paths(out)
    P.write_scores(scored, paths.scores(ratio), index.root)
    if cfg.eval.write_heatmaps:
        P.write_heatmaps(scored, paths.heatmaps(ratio))
    print(f"scores: {paths.scores(ratio)}")


def cmd_eval(cfg: RunConfig, out: Path, args) -> None:
    index = P.open_dataset(cfg, out)
    enc, head = P.load_model(out)
    report = P.ExperimentReport(config=to_dict(cfg))
    rows = P.run_eval(cfg, index, enc, head, out, report)
    report.rows = [r.__dict__ for r in rows]
    report.write(out / "report.json")
    for r in rows:
        print(f"{r.category} ratio={r.coreset_ratio:g} image_auc={r.image_auc:.4f} pixel_auc={r.pixel_auc:.4f}")


def cmd_ablate(cfg: RunConfig, out: Path, args) -> None:
    report = P.run_ablation(cfg, args.axis, out)
    for r in P.summarize_ablation(report):
        print(f"{r['arm']:>24} ratio={r['coreset_ratio']:g} image_auc={r['image_auc']:.4f} pixel_auc={r['pixel_auc']:.4f}")
    failed = [r for r in report.rows if "error" in r]
    for r in failed:
        print(f"arm {r['arm']} (seed {r['seed']}) failed: {r['error']}", file=sys.stderr)


COMMANDS = {
    "synth": cmd_synth,
    "augment": cmd_augment,
    "train": cmd_train,
    "build-bank": cmd_build_bank,
    "score": cmd_score,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config key, e.g. --set cluster.k=3 (repeatable)",
    )
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cutswap", description="Saliency-guided CutSwap anomaly detection")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic category")
    p = sub.add_parser("augment", parents=[common], help="write one epoch of negatives with a manifest")
    p.add_argument("--epoch", type=int, default=0)
    sub.add_parser("train", parents=[common], help="train the encoder on CutSwap pairs")
    sub.add_parser("build-bank", parents=[common], help="build the memory bank at bank.coreset_ratio")
    p = sub.add_parser("score", parents=[common], help="score test images (or --image files) against the bank")
    p.add_argument("--image", action="append", default=[], help="score this image instead of the test split")
    sub.add_parser("eval", parents=[common], help="bank, score and evaluate at every eval.coreset_ratios entry")
    p = sub.add_parser("ablate", parents=[common], help="run one ablation sweep")
    p.add_argument("axis", choices=AXES)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / f"config_{args.command}.yaml")
        COMMANDS[args.command](cfg, out, args)
    except (P.MissingArtifact, FileNotFoundError, BankError, CheckpointError) as exc:
        # a corrupt or mismatched artifact is as unusable as a missing one
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
