"""Multilevel saliency stacks.

Maps come either from disk (any external extractor that writes
``<stem>_layer<idx>.png`` files) or from a built-in proxy: gradient magnitude
of the blurred grayscale image, with the blur widening toward coarser levels.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter

from .dataset import resize_bilinear

PAPER_LEVELS = (4, 9, 16, 23, 30)


@dataclass(frozen=True)
class SaliencyMap:
    level_index: int
    data: np.ndarray  # HxW in [0, 1]
    degenerate: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class SaliencyStack:
    maps: tuple[SaliencyMap, ...]
    total_levels: int

    def __post_init__(self):
        idx = self.selected_indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"level indices must be strictly increasing: {idx}")
        if idx and (idx[0] < 1 or idx[-1] > self.total_levels):
            raise ValueError(f"level indices must lie in [1, {self.total_levels}]")
        if len({m.shape for m in self.maps}) > 1:
            raise ValueError("all maps in a stack must share dimensions")

    @property
    def selected_indices(self) -> tuple[int, ...]:
        return tuple(m.level_index for m in self.maps)

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, i) -> SaliencyMap:
        return self.maps[i]


def normalize_map(raw: np.ndarray, level: int) -> SaliencyMap:
    """Per-map min-max scaling; a constant map becomes all zeros, flagged degenerate."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError(f"saliency map for level {level} has non-finite values")
    lo, hi = raw.min(), raw.max()
    if hi <= lo:
        return SaliencyMap(level, np.zeros_like(raw), degenerate=True)
    return SaliencyMap(level, (raw - lo) / (hi - lo))


def load_saliency_stack(
    directory, image_stem: str, indices, total_levels: int = 30, size: int | None = None
) -> SaliencyStack:
    directory = Path(directory)
    maps = []
    for idx in indices:
        path = directory / f"{image_stem}_layer{idx}.png"
        if not path.is_file():
            raise FileNotFoundError(f"missing saliency level {idx}: {path}")
        with PILImage.open(path) as im:
            raw = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        if size is not None and raw.shape != (size, size):
            raw = resize_bilinear(raw, size, size)
        maps.append(normalize_map(raw, idx))
    return SaliencyStack(tuple(maps), total_levels)


def blur_sigma(level: int, total_levels: int, sigma_min: float = 0.5, sigma_max: float = 8.0) -> float:
    if total_levels == 1:
        return sigma_min
    return sigma_min + (sigma_max - sigma_min) * (level - 1) / (total_levels - 1)


def gradient_magnitude(gray: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(gray)
    return np.hypot(gy, gx)


def builtin_multiscale_saliency(
    img: np.ndarray,
    indices=PAPER_LEVELS,
    total_levels: int = 30,
    sigma_min: float = 0.5,
    sigma_max: float = 8.0,
) -> SaliencyStack:
    if any(i < 1 or i > total_levels for i in indices):
        raise ValueError(f"indices must lie in [1, {total_levels}]")
    gray = np.asarray(img, dtype=np.float64) @ np.array([0.299, 0.587, 0.114])
    maps = []
    for idx in indices:
        sigma = blur_sigma(idx, total_levels, sigma_min, sigma_max)
        raw = gradient_magnitude(gaussian_filter(gray, sigma, mode="nearest"))
        # flat images leave only rounding residue behind
        if raw.max() <= 1e-12:
            raw = np.zeros_like(raw)
        maps.append(normalize_map(raw, idx))
    return SaliencyStack(tuple(maps), total_levels)


def select_subset(stack: SaliencyStack, indices) -> SaliencyStack:
    by_level = {m.level_index: m for m in stack.maps}
    missing = [i for i in indices if i not in by_level]
    if missing:
        raise KeyError(f"levels {missing} not in stack {stack.selected_indices}")
    wanted = set(indices)
    return SaliencyStack(tuple(m for m in stack.maps if m.level_index in wanted), stack.total_levels)
