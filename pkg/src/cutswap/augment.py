"""Saliency-guided CutSwap: anchor sampling, patch swapping and the scar variant."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cluster import (
    ClusterModel,
    DegenerateMapError,
    PixelSet,
    cluster_pixels,
    kmeans_1d,
    max_saliency_cluster,
    min_saliency_cluster,
    top_saliency_pixels,
)
from .dataset import weak_augment
from .saliency import SaliencyMap, SaliencyStack

log = logging.getLogger(__name__)

NORMAL, CUTSWAP, SCAR = 0, 1, 2
STRATEGIES = ("kmeans-max", "kmeans-min", "kmeans-random", "saliency-sort-topM", "whole-image")


class LevelSkip(Exception):
    """This saliency level cannot produce a negative sample."""


@dataclass
class AugmentConfig:
    area_ratio_range: tuple[float, float] = (0.02, 0.15)
    aspect_ratio_range: tuple[float, float] = (0.3, 3.3)
    scar_width_range: tuple[int, int] = (2, 6)
    scar_length_range: tuple[int, int] = (10, 30)
    scar_rotation_range: tuple[float, float] = (-45.0, 45.0)
    max_anchor_attempts: int = 50
    allow_overlap: bool = False
    anchor_strategy: str = "kmeans-max"
    top_m: int = 300
    jitter_strength: float = 0.1
    scar_per_level: bool = False

    def validate(self) -> None:
        for name in ("area_ratio_range", "aspect_ratio_range", "scar_width_range", "scar_length_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high, got {(lo, hi)}")
        lo, hi = self.scar_rotation_range
        if lo > hi:
            raise ValueError("scar_rotation_range is empty")
        if self.anchor_strategy not in STRATEGIES:
            raise ValueError(f"unknown anchor strategy {self.anchor_strategy!r}")
        if self.max_anchor_attempts < 1:
            raise ValueError("max_anchor_attempts must be >= 1")


@dataclass(frozen=True)
class PatchSpec:
    top: int
    left: int
    height: int
    width: int
    rotation_deg: float = 0.0

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)

    def inside(self, h: int, w: int) -> bool:
        return (
            self.height >= 1
            and self.width >= 1
            and self.top >= 0
            and self.left >= 0
            and self.top + self.height <= h
            and self.left + self.width <= w
        )

    def overlaps(self, other: PatchSpec) -> bool:
        return not (
            self.top + self.height <= other.top
            or other.top + other.height <= self.top
            or self.left + self.width <= other.left
            or other.left + other.width <= self.left
        )


@dataclass(frozen=True)
class AnchorPair:
    a1: tuple[int, int]
    a2: tuple[int, int]
    source_level: int = 0


@dataclass
class SamplePair:
    positive: np.ndarray
    negative: np.ndarray
    level: int
    label: int
    anchors: AnchorPair | None = None
    patches: tuple[PatchSpec, PatchSpec] | None = None
    seed: int = 0


@dataclass
class AugmentedSample:
    """One normal image's positive plus all of its negatives."""

    positive: np.ndarray
    pairs: list[SamplePair] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _child_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# anchors and swapping

def sample_anchor_pair(
    pixels: PixelSet,
    patch: tuple[int, int],
    img_dims: tuple[int, int],
    rng_seed: int,
    cfg: AugmentConfig,
    level: int = 0,
) -> AnchorPair:
    """Draw two anchors (upper-left patch corners) from ``pixels``.

    Anchors whose patch would leave the image are rejected outright. Unless
    overlap is allowed, draws repeat until the two footprints are disjoint.
    """
    ph, pw = patch
    H, W = img_dims
    if ph < 1 or pw < 1 or ph > H or pw > W:
        raise LevelSkip(f"patch {patch} does not fit in {img_dims}")
    coords = np.asarray(pixels.coords)
    if len(coords) == 0:
        raise LevelSkip("empty pixel set")
    ok = (coords[:, 0] + ph <= H) & (coords[:, 1] + pw <= W)
    valid = coords[ok]
    if len(valid) < 2:
        raise LevelSkip(f"fewer than two in-bounds anchors for patch {patch}")
    rng = np.random.default_rng(rng_seed)
    for _ in range(cfg.max_anchor_attempts):
        i, j = rng.choice(len(valid), size=2, replace=False)
        a1, a2 = tuple(int(x) for x in valid[i]), tuple(int(x) for x in valid[j])
        if cfg.allow_overlap:
            return AnchorPair(a1, a2, level)
        p1, p2 = PatchSpec(*a1, ph, pw), PatchSpec(*a2, ph, pw)
        if not p1.overlaps(p2):
            return AnchorPair(a1, a2, level)
    raise LevelSkip(f"no disjoint anchor pair after {cfg.max_anchor_attempts} attempts")


def swap_patches(img: np.ndarray, p1: PatchSpec, p2: PatchSpec) -> np.ndarray:
    if (p1.height, p1.width) != (p2.height, p2.width):
        raise ValueError(f"patch sizes differ: {(p1.height, p1.width)} vs {(p2.height, p2.width)}")
    H, W = img.shape[:2]
    if not (p1.inside(H, W) and p2.inside(H, W)):
        raise ValueError("patch footprint leaves the image")
    out = img.copy()
    s1, s2 = p1.slices, p2.slices
    out[s1] = img[s2]
    out[s2] = img[s1]
    return out


def rotate_in_footprint(content: np.ndarray, fallback: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate ``content`` about its center, nearest-neighbour, within its own box.

    Destination pixels whose source falls outside the box keep ``fallback``.
    """
    h, w = content.shape[:2]
    if angle_deg == 0:
        return content.copy()
    t = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    ii, jj = np.mgrid[:h, :w].astype(np.float64)
    # inverse map: destination -> source
    si = cy + np.cos(t) * (ii - cy) + np.sin(t) * (jj - cx)
    sj = cx - np.sin(t) * (ii - cy) + np.cos(t) * (jj - cx)
    si = np.floor(si + 0.5).astype(np.int64)
    sj = np.floor(sj + 0.5).astype(np.int64)
    ok = (si >= 0) & (si < h) & (sj >= 0) & (sj < w)
    out = fallback.copy()
    out[ok] = content[si[ok], sj[ok]]
    return out


def draw_patch_size(rng: np.random.Generator, img_dims: tuple[int, int], cfg: AugmentConfig) -> tuple[int, int]:
    H, W = img_dims
    area = rng.uniform(*cfg.area_ratio_range) * H * W
    lo, hi = cfg.aspect_ratio_range
    aspect = np.exp(rng.uniform(np.log(lo), np.log(hi)))  # height / width
    h = int(np.clip(round(np.sqrt(area * aspect)), 1, H - 1))
    w = int(np.clip(round(np.sqrt(area / aspect)), 1, W - 1))
    return h, w


def draw_scar_size(rng: np.random.Generator, cfg: AugmentConfig) -> tuple[int, int]:
    width = int(rng.integers(cfg.scar_width_range[0], cfg.scar_width_range[1] + 1))
    length = int(rng.integers(cfg.scar_length_range[0], cfg.scar_length_range[1] + 1))
    return (length, width) if rng.random() < 0.5 else (width, length)


# ---------------------------------------------------------------------------
# guidance

def fit_level(smap: SaliencyMap, k: int, max_iters: int = 100, tol: float = 1e-6) -> ClusterModel | None:
    if smap.degenerate:
        return None
    return kmeans_1d(smap.data, k, max_iters=max_iters, tol=tol)


def guided_pixels(
    smap: SaliencyMap,
    k: int,
    strategy: str,
    rng: np.random.Generator,
    model: ClusterModel | None = None,
    top_m: int = 300,
) -> PixelSet:
    """The anchor region of one map under the configured strategy."""
    if strategy == "whole-image":
        rows, cols = np.indices(smap.shape)
        return PixelSet(np.stack([rows.ravel(), cols.ravel()], axis=1), source_cluster=0)
    if smap.degenerate:
        raise DegenerateMapError(f"level {smap.level_index} is degenerate")
    if strategy == "saliency-sort-topM":
        return top_saliency_pixels(smap.data, min(top_m, smap.data.size))
    if model is None:
        model = kmeans_1d(smap.data, k)
    if strategy == "kmeans-max":
        return max_saliency_cluster(model, smap.data)
    if strategy == "kmeans-min":
        return min_saliency_cluster(model, smap.data)
    if strategy == "kmeans-random":
        live = np.unique(model.centroids[model.assignment])
        value = live[rng.integers(len(live))]
        return cluster_pixels(model, smap.data, int(np.flatnonzero(model.centroids == value)[-1]))
    raise ValueError(f"unknown anchor strategy {strategy!r}")


# ---------------------------------------------------------------------------
# negatives

def _guided_swap(pos, smap, k, rng_seed, cfg, model, scar: bool) -> SamplePair:
    if smap.degenerate and cfg.anchor_strategy != "whole-image":
        raise LevelSkip(f"level {smap.level_index} is degenerate")
    rng = np.random.default_rng(rng_seed)
    try:
        pixels = guided_pixels(smap, k, cfg.anchor_strategy, rng, model, cfg.top_m)
    except DegenerateMapError as exc:
        raise LevelSkip(str(exc)) from exc
    dims = pos.shape[:2]
    ph, pw = draw_scar_size(rng, cfg) if scar else draw_patch_size(rng, dims, cfg)
    anchor_seed = int(rng.integers(2**62))
    anchors = sample_anchor_pair(pixels, (ph, pw), dims, anchor_seed, cfg, smap.level_index)
    p1, p2 = PatchSpec(*anchors.a1, ph, pw), PatchSpec(*anchors.a2, ph, pw)
    neg = swap_patches(pos, p1, p2)
    if scar:
        angles = rng.uniform(*cfg.scar_rotation_range, size=2)
        for p, ang in zip((p1, p2), angles):
            s = p.slices
            neg[s] = rotate_in_footprint(neg[s], pos[s], float(ang))
        p1 = PatchSpec(*anchors.a1, ph, pw, float(angles[0]))
        p2 = PatchSpec(*anchors.a2, ph, pw, float(angles[1]))
    return SamplePair(
        positive=pos,
        negative=neg,
        level=smap.level_index,
        label=SCAR if scar else CUTSWAP,
        anchors=anchors,
        patches=(p1, p2),
        seed=rng_seed,
    )


def cutswap_level(
    pos: np.ndarray,
    smap: SaliencyMap,
    k: int,
    rng_seed: int,
    cfg: AugmentConfig,
    model: ClusterModel | None = None,
) -> SamplePair:
    """One negative from one saliency level: cluster, pick region, draw, swap.

    ``model`` lets callers reuse a clustering of ``smap`` across epochs.
    """
    return _guided_swap(pos, smap, k, rng_seed, cfg, model, scar=False)


def scar_swap(
    pos: np.ndarray,
    smap: SaliencyMap,
    k: int,
    rng_seed: int,
    cfg: AugmentConfig,
    model: ClusterModel | None = None,
) -> SamplePair:
    """Swap two long-thin patches, then rotate each swapped-in strip in place."""
    return _guided_swap(pos, smap, k, rng_seed, cfg, model, scar=True)


def cutswap_all_levels(
    normal: np.ndarray,
    stack: SaliencyStack,
    k: int,
    rng_seed: int,
    cfg: AugmentConfig,
    models: list[ClusterModel | None] | None = None,
    positive: np.ndarray | None = None,
) -> AugmentedSample:
    """Weak-augment ``normal`` once, then swap once per selected level."""
    if positive is None:
        size = normal.shape[0]
        positive = weak_augment(normal, size, _child_seed(rng_seed, 0), cfg.jitter_strength)
    out = AugmentedSample(positive=positive)
    for i, smap in enumerate(stack.maps):
        model = models[i] if models is not None else None
        try:
            out.pairs.append(
                cutswap_level(positive, smap, k, _child_seed(rng_seed, 1, smap.level_index), cfg, model)
            )
        except LevelSkip as exc:
            out.warnings.append(f"level {smap.level_index} skipped: {exc}")
    if not out.pairs:
        out.warnings.append("all levels skipped")
        log.warning("all saliency levels skipped for this sample")
    return out


def augment_sample(
    normal: np.ndarray,
    stack: SaliencyStack,
    k: int,
    rng_seed: int,
    cfg: AugmentConfig,
    three_way: bool = True,
    models: list[ClusterModel | None] | None = None,
) -> AugmentedSample:
    """CutSwap negatives for every level plus, in three-way mode, scar negatives.

    Scars are drawn once per call on a seed-chosen level, or once per level
    when ``cfg.scar_per_level`` is set.
    """
    out = cutswap_all_levels(normal, stack, k, rng_seed, cfg, models)
    if not three_way or len(stack) == 0:
        return out
    if cfg.scar_per_level:
        which = list(range(len(stack)))
    else:
        which = [int(np.random.default_rng(_child_seed(rng_seed, 2)).integers(len(stack)))]
    for i in which:
        smap = stack.maps[i]
        model = models[i] if models is not None else None
        try:
            out.pairs.append(
                scar_swap(out.positive, smap, k, _child_seed(rng_seed, 3, smap.level_index), cfg, model)
            )
        except LevelSkip as exc:
            out.warnings.append(f"scar on level {smap.level_index} skipped: {exc}")
    return out
