"""Image- and pixel-level ROC AUC via the Mann-Whitney rank statistic."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def roc_auc(scores, labels) -> float:
    """P(anomalous score > normal score), ties counted one half.

    Labels are 1 for anomalous and 0 for normal; both must be present.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one anomalous and one normal item")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auc(heatmaps, masks, pooling: str = "global") -> float:
    """Pixel-level AUC, pooled across all images or averaged per image.

    Per-image averaging skips images whose mask is all one class.
    """
    heatmaps = [np.asarray(h, dtype=np.float64) for h in heatmaps]
    masks = [np.asarray(m).astype(bool) for m in masks]
    if len(heatmaps) != len(masks):
        raise ValueError("need one mask per heatmap")
    for h, m in zip(heatmaps, masks):
        if h.shape != m.shape:
            raise ValueError(f"heatmap {h.shape} and mask {m.shape} differ in size")
    if pooling == "global":
        return roc_auc(np.concatenate([h.ravel() for h in heatmaps]), np.concatenate([m.ravel() for m in masks]))
    if pooling == "per-image":
        vals = [roc_auc(h, m) for h, m in zip(heatmaps, masks) if 0 < m.sum() < m.size]
        if not vals:
            raise ValueError("no image has both anomalous and normal pixels")
        return float(np.mean(vals))
    raise ValueError(f"unknown pooling {pooling!r}")


@dataclass
class MetricsRow:
    category: str
    coreset_ratio: float
    image_auc: float
    pixel_auc: float
    n_test: int
    seed: int


METRIC_FIELDS = ["category", "coreset_ratio", "image_auc", "pixel_auc", "n_test", "seed"]


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in asdict(r).items()})
