"""End-to-end orchestration: synthesize, augment, train, build banks, score, evaluate."""
from __future__ import annotations

import copy
import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .augment import AugmentedSample, augment_sample, fit_level
from .config import RunConfig, save_config, to_dict
from .dataset import (
    DatasetIndex,
    generate_synthetic_category,
    load_image,
    load_mask,
    resize_bilinear,
    save_image,
    scan_dataset,
    to_uint8,
)
from .encoder import (
    Batch,
    EncoderParams,
    HeadParams,
    load_checkpoint,
    round_to_f32,
    save_checkpoint,
    train,
)
from .memorybank import (
    AnomalyResult,
    MemoryBank,
    build_bank,
    extract_patch_features,
    save_bank,
    score_image,
)
from .metrics import MetricsRow, pixel_auc, roc_auc, write_metrics_csv
from .saliency import SaliencyStack, builtin_multiscale_saliency, load_saliency_stack

log = logging.getLogger(__name__)


class MissingArtifact(FileNotFoundError):
    pass


def stage_seed(seed: int, stage: str) -> int:
    key = [int(seed)] + [ord(c) for c in stage]
    return int(np.random.SeedSequence(key).generate_state(1, np.uint32)[0])


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CUTSWAP_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# data

@dataclass
class Paths:
    out: Path

    @property
    def dataset(self) -> Path:
        return self.out / "dataset"

    @property
    def checkpoint(self) -> Path:
        return self.out / "model" / "checkpoint.csw"

    @property
    def loss_csv(self) -> Path:
        return self.out / "model" / "loss.csv"

    def bank(self, ratio: float) -> Path:
        return self.out / "bank" / f"bank_{ratio:g}.csb"

    def scores(self, ratio: float) -> Path:
        return self.out / "scores" / f"scores_{ratio:g}.csv"

    def heatmaps(self, ratio: float) -> Path:
        return self.out / "heatmaps" / f"{ratio:g}"

    @property
    def metrics(self) -> Path:
        return self.out / "metrics.csv"


def dataset_root(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.data.root) if cfg.data.root else Paths(out).dataset


def synthesize(cfg: RunConfig, out: Path) -> DatasetIndex:
    synth = copy.copy(cfg.synth)
    synth.root = str(dataset_root(cfg, out))
    synth.category = cfg.data.category
    return generate_synthetic_category(synth, stage_seed(cfg.seed, "synth"))


def open_dataset(cfg: RunConfig, out: Path, create: bool = False) -> DatasetIndex:
    root = dataset_root(cfg, out)
    if not (root / "train" / "good").is_dir():
        if create and not cfg.data.root:
            return synthesize(cfg, out)
        raise MissingArtifact(f"no dataset at {root} (run `synth` first or set data.root)")
    index = scan_dataset(root, cfg.data.category)
    index.validate()
    return index


def load_working(path, size: int) -> np.ndarray:
    return resize_bilinear(load_image(path), size, size)


def saliency_for(cfg: RunConfig, img: np.ndarray, stem: str) -> SaliencyStack:
    s = cfg.saliency
    if s.source == "external":
        return load_saliency_stack(s.external_dir, stem, s.levels, s.total_levels, cfg.data.resolution)
    return builtin_multiscale_saliency(img, s.levels, s.total_levels, s.sigma_min, s.sigma_max)


# ---------------------------------------------------------------------------
# augmentation stream

class AugmentationStream:
    """Fresh CutSwap negatives for every epoch, seeded by (seed, epoch, image).

    Saliency maps and their clusterings depend only on the normal images, so
    they are computed once up front.
    """

    def __init__(self, images, stacks, cfg: RunConfig, seed: int):
        self.images = images
        self.stacks = stacks
        self.cfg = cfg
        self.seed = seed
        k = cfg.cluster.k
        needs_models = cfg.augment.anchor_strategy.startswith("kmeans")
        self.models = [
            [fit_level(m, k, cfg.cluster.max_iters, cfg.cluster.tol) if needs_models else None for m in st.maps]
            for st in stacks
        ]

    def sample(self, epoch: int, i: int) -> AugmentedSample:
        seed = int(np.random.SeedSequence([self.seed, epoch, i]).generate_state(1, np.uint32)[0])
        return augment_sample(
            self.images[i],
            self.stacks[i],
            self.cfg.cluster.k,
            seed,
            self.cfg.augment,
            three_way=self.cfg.train.three_way,
            models=self.models[i],
        )

    def samples(self, epoch: int) -> list[AugmentedSample]:
        n = len(self.images)
        workers = min(worker_count(), n)
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                return list(pool.map(lambda i: self.sample(epoch, i), range(n)))
        return [self.sample(epoch, i) for i in range(n)]

    def epoch_batches(self, epoch: int, batch_size: int) -> list[Batch]:
        samples = self.samples(epoch)
        order = np.random.default_rng([self.seed, epoch, 7]).permutation(len(samples))
        batches = []
        for s in range(0, len(order), batch_size):
            imgs, labels, weights = [], [], []
            for i in order[s : s + batch_size]:
                aug = samples[i]
                # a positive shared by several negatives counts once per pair
                imgs.append(aug.positive)
                labels.append(0)
                weights.append(max(1, len(aug.pairs)))
                for p in aug.pairs:
                    imgs.append(p.negative)
                    labels.append(p.label)
                    weights.append(1)
            batches.append(Batch(np.stack(imgs), np.array(labels), np.array(weights, dtype=np.float64)))
        return batches


def make_stream(cfg: RunConfig, index: DatasetIndex) -> AugmentationStream:
    size = cfg.data.resolution
    images = [load_working(p, size) for p in index.train_normals]
    if not images:
        raise MissingArtifact("dataset has no training images")
    stacks = [saliency_for(cfg, img, p.stem) for img, p in zip(images, index.train_normals)]
    return AugmentationStream(images, stacks, cfg, stage_seed(cfg.seed, "augment"))


# ---------------------------------------------------------------------------
# stages

def run_augment(cfg: RunConfig, index: DatasetIndex, out: Path, epoch: int = 0) -> Path:
    """Write one epoch of negatives plus a CSV manifest."""
    stream = make_stream(cfg, index)
    neg_dir = out / "augment"
    rows = []
    for i, (path, aug) in enumerate(zip(index.train_normals, stream.samples(epoch))):
        pos_path = neg_dir / "positive" / f"{path.stem}.png"
        save_image(pos_path, aug.positive)
        for j, pair in enumerate(aug.pairs):
            neg_path = neg_dir / "negative" / f"{path.stem}_{j:02d}_l{pair.level}_c{pair.label}.png"
            save_image(neg_path, pair.negative)
            p1, p2 = pair.patches
            rows.append(
                {
                    "positive": pos_path.relative_to(out).as_posix(),
                    "negative": neg_path.relative_to(out).as_posix(),
                    "level": pair.level,
                    "label": pair.label,
                    "anchor1": f"{p1.top} {p1.left}",
                    "anchor2": f"{p2.top} {p2.left}",
                    "patch_h": p1.height,
                    "patch_w": p1.width,
                    "rotation": f"{p1.rotation_deg:.3f} {p2.rotation_deg:.3f}",
                    "seed": pair.seed,
                }
            )
        for w in aug.warnings:
            log.info("%s: %s", path.name, w)
    manifest = neg_dir / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        fields = ["positive", "negative", "level", "label", "anchor1", "anchor2", "patch_h", "patch_w", "rotation", "seed"]
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return manifest


def run_train(cfg: RunConfig, index: DatasetIndex, out: Path):
    stream = make_stream(cfg, index)
    tcfg = copy.copy(cfg.train)
    tcfg.seed = stage_seed(cfg.seed, "train")
    enc, head, curve = train(stream, tcfg)
    paths = Paths(out)
    save_checkpoint(paths.checkpoint, enc, head)
    with paths.loss_csv.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for e, v in enumerate(curve):
            w.writerow([e, f"{v:.8f}"])
    # downstream stages see exactly what the checkpoint stores
    enc, head = round_to_f32(enc, head)
    return enc, head, curve


def load_model(out: Path) -> tuple[EncoderParams, HeadParams]:
    path = Paths(out).checkpoint
    if not path.is_file():
        raise MissingArtifact(f"no checkpoint at {path} (run `train` first)")
    return load_checkpoint(path)


def run_build_bank(cfg, index, enc, head, ratio: float) -> MemoryBank:
    size = cfg.data.resolution
    images = [load_working(p, size) for p in index.train_normals]
    return build_bank(
        enc, head, images, cfg.bank.grid, ratio, stage_seed(cfg.seed, "coreset"), cfg.bank.min_bank_size
    )


@dataclass
class ScoredItem:
    path: Path
    label: int
    defect: str
    result: AnomalyResult
    mask: np.ndarray | None


def run_score(cfg: RunConfig, index: DatasetIndex, enc: EncoderParams, bank: MemoryBank, items=None) -> list[ScoredItem]:
    size = cfg.data.resolution
    scored = []
    for item in items if items is not None else index.test_items:
        img = load_working(item.path, size)
        res = score_image(bank, extract_patch_features(enc, img, cfg.bank.grid), (size, size), cfg.bank.smooth_sigma)
        mask = None
        if item.label == 0:
            mask = np.zeros((size, size), dtype=bool)
        elif item.mask_path is not None:
            m = load_mask(item.mask_path).astype(np.float64)
            mask = resize_bilinear(m, size, size) >= 0.5
        scored.append(ScoredItem(item.path, item.label, item.defect, res, mask))
    return scored


def write_scores(scored: list[ScoredItem], path: Path, root: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "label", "defect", "image_score"])
        for s in scored:
            try:
                name = s.path.relative_to(root).as_posix()
            except ValueError:
                name = s.path.as_posix()
            w.writerow([name, s.label, s.defect, f"{s.result.image_score:.8f}"])


def write_heatmaps(scored: list[ScoredItem], directory: Path) -> float:
    """Save 8-bit heatmaps scaled by the run's largest value; returns that scale."""
    scale = max((float(s.result.heatmap.max()) for s in scored), default=0.0)
    for s in scored:
        img = s.result.heatmap / scale if scale > 0 else s.result.heatmap * 0
        dest = directory / s.defect / f"{s.path.stem}.png"
        dest.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(img), mode="L").save(dest)
    return scale


def evaluate(cfg: RunConfig, index: DatasetIndex, scored: list[ScoredItem], ratio: float) -> MetricsRow:
    img_auc = roc_auc([s.result.image_score for s in scored], [s.label for s in scored])
    with_masks = [s for s in scored if s.mask is not None]
    try:
        pix = pixel_auc([s.result.heatmap for s in with_masks], [s.mask for s in with_masks], cfg.eval.pixel_pooling)
    except ValueError:
        pix = float("nan")
    return MetricsRow(index.category, ratio, img_auc, pix, len(scored), cfg.seed)


@dataclass
class ExperimentReport:
    rows: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    version: str = __version__
    notes: dict = field(default_factory=dict)

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.__dict__, indent=2, default=str))


def run_eval(cfg: RunConfig, index: DatasetIndex, enc, head, out: Path, report: ExperimentReport | None = None):
    """Bank, score and evaluate once per configured coreset ratio."""
    paths = Paths(out)
    rows = []
    for ratio in cfg.eval.coreset_ratios:
        t0 = time.perf_counter()
        bank = run_build_bank(cfg, index, enc, head, ratio)
        save_bank(bank, paths.bank(ratio))
        scored = run_score(cfg, index, enc, bank)
        write_scores(scored, paths.scores(ratio), index.root)
        if cfg.eval.write_heatmaps:
            scale = write_heatmaps(scored, paths.heatmaps(ratio))
            if report is not None:
                report.notes[f"heatmap_scale_{ratio:g}"] = scale
        rows.append(evaluate(cfg, index, scored, ratio))
        if report is not None:
            report.timings[f"eval_{ratio:g}"] = time.perf_counter() - t0
    write_metrics_csv(paths.metrics, rows)
    return rows


def run_pipeline(cfg: RunConfig, out, report: ExperimentReport | None = None) -> list[MetricsRow]:
    """Synthesize if needed, train, then evaluate at every coreset ratio."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report = report if report is not None else ExperimentReport(config=to_dict(cfg))
    save_config(cfg, out / "config.yaml")
    t0 = time.perf_counter()
    index = open_dataset(cfg, out, create=True)
    report.timings["data"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    enc, head, _ = run_train(cfg, index, out)
    report.timings["train"] = time.perf_counter() - t0
    rows = run_eval(cfg, index, enc, head, out, report)
    report.rows = [r.__dict__ for r in rows]
    report.write(out / "report.json")
    return rows


# ---------------------------------------------------------------------------
# ablations

def ablation_arms(cfg: RunConfig, axis: str) -> list[tuple[str, RunConfig]]:
    arms = []

    def arm(name, mutate):
        c = copy.deepcopy(cfg)
        mutate(c)
        arms.append((name, c))

    a = cfg.ablate
    if axis == "k":
        for k in a.k_values:
            # a single cluster is the whole image
            strategy = "whole-image" if k == 1 else "kmeans-max"
            arm(f"k={k}", lambda c, k=k, s=strategy: (setattr(c.cluster, "k", k), setattr(c.augment, "anchor_strategy", s)))
    elif axis == "cluster_choice":
        for s in a.cluster_choices:
            arm(s, lambda c, s=s: setattr(c.augment, "anchor_strategy", s))
    elif axis == "level_combo":
        for combo in a.level_combos:
            name = "+".join(f"#{i}" for i in combo)
            arm(name, lambda c, combo=combo: setattr(c.saliency, "levels", tuple(combo)))
    elif axis == "anchor_strategy":
        for s in a.anchor_strategies:
            arm(s, lambda c, s=s: setattr(c.augment, "anchor_strategy", s))
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    for _, c in arms:
        c.validate()
    return arms


def run_ablation(cfg: RunConfig, axis: str, out) -> ExperimentReport:
    """Run every arm of ``axis`` for every ablation seed; arms share all seeds."""
    out = Path(out)
    report = ExperimentReport(config=to_dict(cfg))
    report.notes["axis"] = axis
    t_all = time.perf_counter()
    for seed in cfg.ablate.seeds:
        base = copy.deepcopy(cfg)
        base.seed = seed
        seed_dir = out / f"seed_{seed}"
        if not base.data.root:
            # one dataset per seed, shared by all arms
            base.data.root = str(seed_dir / "dataset")
            if not (Path(base.data.root) / "train" / "good").is_dir():
                synthesize(base, seed_dir)
        for name, arm_cfg in ablation_arms(base, axis):
            arm_dir = seed_dir / name.replace("/", "_")
            t0 = time.perf_counter()
            try:
                rows = run_pipeline(arm_cfg, arm_dir)
            except Exception as exc:  # an arm failure must not stop the sweep
                log.exception("arm %s failed", name)
                report.rows.append({"axis": axis, "arm": name, "seed": seed, "error": str(exc)})
                continue
            for r in rows:
                report.rows.append({"axis": axis, "arm": name, **r.__dict__})
            report.timings[f"{seed}/{name}"] = time.perf_counter() - t0
    report.timings["total"] = time.perf_counter() - t_all
    write_ablation_table(report, out / f"ablation_{axis}.csv")
    report.write(out / f"ablation_{axis}.json")
    return report


def summarize_ablation(report: ExperimentReport) -> list[dict]:
    """Mean AUCs per (arm, coreset ratio) across seeds, in arm order."""
    groups: dict[tuple, list[dict]] = {}
    for r in report.rows:
        if "error" in r:
            continue
        groups.setdefault((r["arm"], r["coreset_ratio"]), []).append(r)
    return [
        {
            "arm": arm,
            "coreset_ratio": ratio,
            "image_auc": float(np.mean([r["image_auc"] for r in rs])),
            "pixel_auc": float(np.mean([r["pixel_auc"] for r in rs])),
            "n_seeds": len(rs),
        }
        for (arm, ratio), rs in groups.items()
    ]


def write_ablation_table(report: ExperimentReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "coreset_ratio", "image_auc", "pixel_auc", "n_seeds"])
        for r in summarize_ablation(report):
            w.writerow([r["arm"], f"{r['coreset_ratio']:g}", f"{r['image_auc']:.6f}", f"{r['pixel_auc']:.6f}", r["n_seeds"]])

