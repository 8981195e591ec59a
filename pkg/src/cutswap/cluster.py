"""One-dimensional K-means over saliency intensities.

Lloyd iterations start from centers spaced evenly over the value range, so the
whole procedure is seed-free and bit-deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateMapError(ValueError):
    """A saliency map offers no usable region for anchor sampling."""


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray  # (k,) ascending
    assignment: np.ndarray  # per-value cluster id, same shape as the input
    inertia: float
    iterations_run: int
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)


@dataclass(frozen=True)
class PixelSet:
    coords: np.ndarray  # (n, 2) int (row, col), row-major order
    source_cluster: int

    def __len__(self) -> int:
        return len(self.coords)


def _assign(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, so ties go to the lower id
    return np.argmin(np.abs(values[:, None] - centroids[None, :]), axis=1)


def _inertia(values: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(np.sum((values - centroids[labels]) ** 2))


def initial_centroids(lo: float, hi: float, k: int) -> np.ndarray:
    """Centers of ``k`` equal-width bins spanning ``[lo, hi]``."""
    return lo + (np.arange(k) + 0.5) * (hi - lo) / k


def kmeans_1d(values, k: int, max_iters: int = 100, tol: float = 1e-6) -> ClusterModel:
    """Cluster scalar values with Lloyd's algorithm.

    ``tol`` is relative to the value range: iteration stops once no centroid
    moves by more than ``tol * (max - min)``. A cluster that goes empty is
    re-seeded at the value currently farthest from its own centroid (first such
    value in input order). The returned centroids are sorted ascending and the
    assignment is relabelled to match; coincident centroids are not merged.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    arr = np.asarray(values, dtype=np.float64)
    shape = arr.shape
    v = arr.ravel()
    if v.size == 0:
        raise ValueError("cannot cluster an empty input")
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")

    lo, hi = float(v.min()), float(v.max())
    abs_tol = tol * (hi - lo)
    centroids = initial_centroids(lo, hi, k)
    labels = _assign(v, centroids)
    history = [_inertia(v, centroids, labels)]
    iters = 0
    for iters in range(1, max_iters + 1):
        sums = np.bincount(labels, weights=v, minlength=k)
        counts = np.bincount(labels, minlength=k)
        new = centroids.copy()
        live = counts > 0
        rough = np.where(live, sums / np.maximum(counts, 1), centroids)
        # second pass: a cluster of identical values gets exactly that value
        resid = np.bincount(labels, weights=v - rough[labels], minlength=k)
        new[live] = rough[live] + resid[live] / counts[live]
        for j in np.flatnonzero(~live):
            resid = np.abs(v - new[labels])
            worst = int(np.argmax(resid))
            if resid[worst] == 0.0:
                break  # fewer distinct values than clusters
            new[j] = v[worst]
            labels = labels.copy()
            labels[worst] = j
        shift = float(np.max(np.abs(new - centroids)))
        centroids = new
        labels = _assign(v, centroids)
        history.append(_inertia(v, centroids, labels))
        if shift <= abs_tol:
            break

    order = np.argsort(centroids, kind="stable")
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    centroids = centroids[order]
    labels = remap[labels]
    return ClusterModel(
        centroids=centroids,
        assignment=labels.reshape(shape),
        inertia=history[-1],
        iterations_run=iters,
        inertia_history=history,
    )


def _pixel_set(mask: np.ndarray, cluster: int) -> PixelSet:
    coords = np.argwhere(mask)
    if len(coords) == 0:
        raise DegenerateMapError(f"cluster {cluster} is empty")
    return PixelSet(coords=coords, source_cluster=cluster)


def cluster_pixels(model: ClusterModel, saliency: np.ndarray, which: int) -> PixelSet:
    """Pixels whose centroid value equals that of cluster ``which``.

    Coincident centroids are treated as one cluster; since assignment ties go
    to the lower id, only one of them can hold pixels.
    """
    if model.assignment.shape != np.shape(saliency):
        raise ValueError("cluster model was not fitted on this map")
    target = model.centroids[which]
    mask = model.centroids[model.assignment] == target
    return _pixel_set(mask, which)


def max_saliency_cluster(model: ClusterModel, saliency: np.ndarray) -> PixelSet:
    # highest index wins among coincident maxima
    return cluster_pixels(model, saliency, model.k - 1)


def min_saliency_cluster(model: ClusterModel, saliency: np.ndarray) -> PixelSet:
    return cluster_pixels(model, saliency, 0)


def top_saliency_pixels(saliency: np.ndarray, count: int) -> PixelSet:
    """The ``count`` most salient pixels; ties resolved in row-major order."""
    s = np.asarray(saliency)
    if count < 2:
        raise ValueError("count must be at least 2")
    if count > s.size:
        raise ValueError(f"count {count} exceeds map size {s.size}")
    flat = s.ravel()
    # stable sort on the negated values keeps row-major order among ties
    idx = np.argsort(-flat, kind="stable")[:count]
    idx.sort()
    rows, cols = np.unravel_index(idx, s.shape)
    return PixelSet(coords=np.stack([rows, cols], axis=1), source_cluster=-1)
