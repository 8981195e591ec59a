"""Patch-feature memory bank: tiling, greedy coreset, nearest-neighbour scoring."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .dataset import resize_bilinear
from .encoder import EncoderParams, HeadParams, checkpoint_digest, encoder_forward

BANK_MAGIC = b"CSB1"
_HEADER = struct.Struct("<IIIId")


class BankError(ValueError):
    pass


@dataclass
class PatchFeatures:
    """All tile features of one image, row-major over the grid."""

    vectors: np.ndarray  # (rows * cols, D) float32
    grid: tuple[int, int]
    source: str = ""

    def at(self, row: int, col: int) -> np.ndarray:
        return self.vectors[row * self.grid[1] + col]


@dataclass
class MemoryBank:
    features: np.ndarray  # (count, D) float32, in selection order
    coreset_ratio: float
    grid_dims: tuple[int, int]
    encoder_checksum: bytes = b"\0" * 32
    selected: np.ndarray | None = field(default=None, compare=False)  # candidate indices
    min_distances: np.ndarray | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.features)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return (
            self.coreset_ratio == other.coreset_ratio
            and tuple(self.grid_dims) == tuple(other.grid_dims)
            and self.encoder_checksum == other.encoder_checksum
            and self.features.dtype == other.features.dtype
            and np.array_equal(self.features, other.features)
        )


@dataclass
class AnomalyResult:
    image_score: float
    heatmap: np.ndarray  # (H, W)
    patch_scores: np.ndarray  # (rows, cols)


# ---------------------------------------------------------------------------
# features

def tile_image(img: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Split into rows x cols equal tiles, reflect-padding to a divisible size.

    Returns (rows * cols, th, tw, 3), row-major over the grid.
    """
    rows, cols = grid
    H, W = img.shape[:2]
    if rows < 1 or cols < 1 or rows > H or cols > W:
        raise ValueError(f"grid {grid} does not fit image {H}x{W}")
    th, tw = math.ceil(H / rows), math.ceil(W / cols)
    ph, pw = th * rows - H, tw * cols - W
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    tiles = img.reshape(rows, th, cols, tw, 3).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(rows * cols, th, tw, 3)


def extract_patch_features(enc: EncoderParams, img: np.ndarray, grid=(8, 8), source: str = "") -> PatchFeatures:
    """Encode every tile on its own; features are stored as float32."""
    tiles = tile_image(np.asarray(img, dtype=np.float64), tuple(grid))
    g, _ = encoder_forward(enc, tiles)
    return PatchFeatures(g.astype(np.float32), tuple(grid), source)


# ---------------------------------------------------------------------------
# coreset

def coreset_size(n: int, ratio: float, min_size: int = 1) -> int:
    return min(n, max(min_size, math.ceil(ratio * n)))


def greedy_coreset(candidates, ratio: float, seed: int = 0, min_size: int = 1, grid_dims=(1, 1)) -> MemoryBank:
    """Farthest-point (greedy k-center) subsampling.

    The first pick is drawn from ``seed``; each later pick maximises its
    Euclidean distance to everything already chosen (lowest index on ties).
    Keeps ``ceil(ratio * n)`` vectors, raised to ``min_size`` when possible.
    """
    x = np.asarray(candidates)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if n == 0:
        raise BankError("no candidate features")
    if not 0 < ratio <= 1:
        raise ValueError(f"coreset ratio must lie in (0, 1], got {ratio}")
    m = coreset_size(n, ratio, min_size)
    xf = x.astype(np.float64)
    first = int(np.random.default_rng(seed).integers(n))
    selected = [first]
    gaps = [np.inf]
    dist = np.sqrt(((xf - xf[first]) ** 2).sum(axis=1))
    for _ in range(m - 1):
        nxt = int(np.argmax(dist))
        selected.append(nxt)
        gaps.append(float(dist[nxt]))
        dist = np.minimum(dist, np.sqrt(((xf - xf[nxt]) ** 2).sum(axis=1)))
    sel = np.array(selected)
    return MemoryBank(
        features=np.ascontiguousarray(x[sel]),
        coreset_ratio=float(ratio),
        grid_dims=tuple(grid_dims),
        selected=sel,
        min_distances=np.array(gaps),
    )


def build_bank(
    enc: EncoderParams,
    head: HeadParams | None,
    images,
    grid=(8, 8),
    ratio: float = 0.01,
    seed: int = 0,
    min_size: int = 1,
) -> MemoryBank:
    feats = [extract_patch_features(enc, img, grid).vectors for img in images]
    bank = greedy_coreset(np.concatenate(feats), ratio, seed, min_size, grid)
    if head is not None:
        bank.encoder_checksum = checkpoint_digest(enc, head)
    return bank


# ---------------------------------------------------------------------------
# scoring

def nearest_distances(queries: np.ndarray, bank: np.ndarray, max_elems: int = 1 << 22) -> np.ndarray:
    """Exact Euclidean distance from each query to its nearest bank vector."""
    q = np.asarray(queries, dtype=np.float64)
    b = np.asarray(bank, dtype=np.float64)
    if len(b) == 0:
        raise BankError("empty memory bank")
    out = np.empty(len(q))
    step = max(1, max_elems // (b.size or 1))
    for s in range(0, len(q), step):
        block = q[s : s + step]
        # direct differences keep identical vectors at exactly zero
        d2 = ((block[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        out[s : s + len(block)] = np.sqrt(d2.min(axis=1))
    return out


def score_image(
    bank: MemoryBank, patches: PatchFeatures, out_dims: tuple[int, int], smooth_sigma: float = 4.0
) -> AnomalyResult:
    if len(bank) == 0:
        raise BankError("empty memory bank")
    if tuple(patches.grid) != tuple(bank.grid_dims):
        raise BankError(f"patch grid {patches.grid} does not match bank grid {bank.grid_dims}")
    scores = nearest_distances(patches.vectors, bank.features).reshape(patches.grid)
    heat = resize_bilinear(scores, *out_dims)
    if smooth_sigma > 0:
        heat = gaussian_filter(heat, smooth_sigma, mode="nearest")
    return AnomalyResult(float(scores.max()), np.maximum(heat, 0.0), scores)


# ---------------------------------------------------------------------------
# persistence

def bank_bytes(bank: MemoryBank) -> bytes:
    feats = np.ascontiguousarray(bank.features, dtype="<f4")
    count, dim = feats.shape
    digest = bytes(bank.encoder_checksum)
    if len(digest) != 32:
        raise BankError("encoder checksum must be 32 bytes")
    header = _HEADER.pack(dim, count, bank.grid_dims[0], bank.grid_dims[1], bank.coreset_ratio)
    return BANK_MAGIC + header + feats.tobytes() + digest


def save_bank(bank: MemoryBank, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bank_bytes(bank))


def parse_bank(data: bytes) -> MemoryBank:
    if data[:4] != BANK_MAGIC:
        raise BankError("bad bank magic")
    if len(data) < 4 + _HEADER.size + 32:
        raise BankError("truncated bank file")
    dim, count, rows, cols, ratio = _HEADER.unpack_from(data, 4)
    off = 4 + _HEADER.size
    expected = off + 4 * dim * count + 32
    if len(data) != expected:
        raise BankError(f"bank file is {len(data)} bytes, header implies {expected}")
    feats = np.frombuffer(data, dtype="<f4", count=dim * count, offset=off).reshape(count, dim)
    return MemoryBank(
        features=feats.astype(np.float32),
        coreset_ratio=ratio,
        grid_dims=(rows, cols),
        encoder_checksum=data[expected - 32 :],
    )


def load_bank(path, encoder: tuple[EncoderParams, HeadParams] | bytes | None = None) -> MemoryBank:
    """Read a bank file; with ``encoder`` given, insist it produced the bank."""
    bank = parse_bank(Path(path).read_bytes())
    if encoder is not None:
        digest = encoder if isinstance(encoder, bytes) else checkpoint_digest(*encoder)
        if digest != bank.encoder_checksum:
            raise BankError("memory bank was built with a different encoder checkpoint")
    return bank
