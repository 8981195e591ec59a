"""Image I/O, MVTec-style dataset scanning, weak augmentation and synthetic data."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff")
MIN_SIDE = 8


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# raster I/O

def as_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DatasetError(f"expected HxWx3 image, got shape {img.shape}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise DatasetError(f"image smaller than {MIN_SIDE}x{MIN_SIDE}: {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise DatasetError("image values must lie in [0, 1]")
    return img


def load_image(path) -> np.ndarray:
    """Read an 8-bit raster as an HxWx3 float64 array in [0, 1].

    Grayscale rasters are replicated to three channels; RGBA and other channel
    layouts are rejected. No size check is applied here so that tiny test
    rasters round-trip; :func:`as_image` enforces the minimum side.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot decode {path}: {exc}") from exc
    if mode in ("L", "P"):
        if mode == "P":
            raise DatasetError(f"palette images are not supported: {path}")
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    elif mode != "RGB":
        raise DatasetError(f"unsupported channel layout {mode!r} in {path}")
    if arr.dtype != np.uint8:
        raise DatasetError(f"only 8-bit rasters are supported: {path}")
    return arr.astype(np.float64) / 255.0


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(arr) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_image(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(img)).save(path)


def load_mask(path) -> np.ndarray:
    """Binary mask (bool HxW); any nonzero pixel counts as anomalous."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 0


def save_mask(path, mask: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# weak augmentation

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with pixel-center alignment.

    Output pixel ``i`` samples the input at ``(i + 0.5) * in/out - 0.5``,
    clamped to the valid range. Works on HxW and HxWxC arrays.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        i0 = np.floor(x).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, x - i0

    r0, r1, fr = axis(in_h, out_h)
    c0, c1, fc = axis(in_w, out_w)
    extra = (None,) * (img.ndim - 2)
    fr = fr[(slice(None), None) + extra]
    fc = fc[(None, slice(None)) + extra]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    out = top * (1 - fr) + bot * fr
    # bilinear weights are convex, so this only trims rounding noise
    lo, hi = img.min(), img.max()
    return np.clip(out, lo, hi)


def _gray(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def color_jitter(img: np.ndarray, rng_seed: int, strength: float = 0.1) -> np.ndarray:
    """Random brightness, contrast and saturation, applied in that order.

    Each factor is drawn from ``U[1 - strength, 1 + strength]``:
    brightness multiplies, contrast scales about the image mean, saturation
    scales about the per-pixel gray value. The result is clamped to [0, 1].
    """
    if strength < 0:
        raise ValueError("strength must be non-negative")
    img = np.asarray(img, dtype=np.float64)
    if strength == 0:
        return img.copy()
    rng = np.random.default_rng(rng_seed)
    b, c, s = rng.uniform(1 - strength, 1 + strength, size=3)
    out = np.clip(img * b, 0, 1)
    mean = out.mean()
    out = np.clip(mean + (out - mean) * c, 0, 1)
    gray = _gray(out)[:, :, None]
    out = np.clip(gray + (out - gray) * s, 0, 1)
    return out


def weak_augment(img: np.ndarray, size: int, rng_seed: int, strength: float) -> np.ndarray:
    return color_jitter(resize_bilinear(img, size, size), rng_seed, strength)


# ---------------------------------------------------------------------------
# dataset layout

@dataclass
class TestItem:
    path: Path
    label: int  # 0 normal, 1 anomalous
    mask_path: Path | None = None
    defect: str = "good"


@dataclass
class DatasetIndex:
    category: str
    root: Path
    train_normals: list[Path] = field(default_factory=list)
    test_items: list[TestItem] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def validate(self) -> None:
        """Check every anomalous item's mask against its image size."""
        for item in self.test_items:
            if item.mask_path is None:
                continue
            with PILImage.open(item.path) as im:
                img_size = im.size
            with PILImage.open(item.mask_path) as m:
                mask_size = m.size
            if img_size != mask_size:
                raise DatasetError(
                    f"mask {item.mask_path} is {mask_size}, image {item.path} is {img_size}"
                )


def _images_in(d: Path) -> list[Path]:
    if not d.is_dir():
        return []
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def scan_dataset(root, category: str | None = None) -> DatasetIndex:
    root = Path(root)
    train_dir = root / "train" / "good"
    if not train_dir.is_dir():
        raise DatasetError(f"missing {train_dir}")
    index = DatasetIndex(category=category or root.name, root=root)
    index.train_normals = _images_in(train_dir)
    test_root = root / "test"
    subdirs = sorted(p for p in test_root.iterdir() if p.is_dir()) if test_root.is_dir() else []
    for sub in subdirs:
        normal = sub.name == "good"
        for path in _images_in(sub):
            item = TestItem(path=path, label=0 if normal else 1, defect=sub.name)
            if not normal:
                mask = root / "ground_truth" / sub.name / f"{path.stem}_mask.png"
                if mask.is_file():
                    item.mask_path = mask
                else:
                    index.warnings.append(f"no mask for {path}")
            index.test_items.append(item)
    for w in index.warnings:
        log.warning(w)
    return index


# ---------------------------------------------------------------------------
# synthetic benchmark

@dataclass
class SynthConfig:
    root: str = "dataset"
    category: str = "synthetic"
    image_size: int = 128
    n_train: int = 20
    n_test_normal: int = 10
    n_test_anomalous: int = 10
    texture: str = "stripes"  # stripes | noise
    defect: str = "blob"  # blob | scratch
    defect_delta: float = 0.35
    defect_radius: tuple[int, int] = (5, 9)
    scratch_length: tuple[int, int] = (20, 40)
    scratch_width: float = 2.0
    object_fraction: float = 0.36  # object radius as a fraction of image size
    stripe_period: float = 10.0
    noise_sigma: float = 0.01
    position_jitter: int = 2

    def validate(self) -> None:
        if self.texture not in ("stripes", "noise"):
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.defect not in ("blob", "scratch"):
            raise ValueError(f"unknown defect {self.defect!r}")
        if self.image_size < MIN_SIDE:
            raise ValueError("image_size too small")
        if self.n_train < 1 or self.n_test_normal < 0 or self.n_test_anomalous < 0:
            raise ValueError("invalid sample counts")
        obj_r = self.object_fraction * self.image_size
        extent = 2 * max(self.defect_radius) if self.defect == "blob" else max(self.scratch_length)
        if extent >= 2 * obj_r - 2:
            raise ValueError("defect larger than the object region")


def disk_mask(shape: tuple[int, int], center: tuple[float, float], radius: float) -> np.ndarray:
    rr, cc = np.mgrid[: shape[0], : shape[1]]
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius**2


def segment_mask(shape, p0, p1, width: float) -> np.ndarray:
    rr, cc = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    d = np.subtract(p1, p0, dtype=np.float64)
    t = ((rr - p0[0]) * d[0] + (cc - p0[1]) * d[1]) / max(float(d @ d), 1e-12)
    t = np.clip(t, 0, 1)
    dist2 = (rr - p0[0] - t * d[0]) ** 2 + (cc - p0[1] - t * d[1]) ** 2
    return dist2 <= (width / 2) ** 2


def render_normal(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, tuple[int, int]]:
    """A textured disk on a plain background. Returns (image, object center)."""
    s = cfg.image_size
    j = cfg.position_jitter
    center = (s // 2 + int(rng.integers(-j, j + 1)), s // 2 + int(rng.integers(-j, j + 1)))
    obj = disk_mask((s, s), center, cfg.object_fraction * s)
    rr, cc = np.mgrid[:s, :s].astype(np.float64)
    if cfg.texture == "stripes":
        theta = np.pi / 4 + rng.uniform(-0.05, 0.05)
        phase = rng.uniform(0, 2 * np.pi)
        u = (rr * np.cos(theta) + cc * np.sin(theta)) / cfg.stripe_period
        tex = 0.55 + 0.2 * np.sin(2 * np.pi * u + phase)
    else:
        from scipy.ndimage import gaussian_filter

        tex = gaussian_filter(rng.normal(size=(s, s)), 2.0)
        tex = 0.55 + 0.2 * tex / (np.abs(tex).max() + 1e-12)
    tint = np.array([1.0, 0.85, 0.6])
    img = np.empty((s, s, 3))
    img[:] = np.array([0.12, 0.12, 0.14])
    img[obj] = tex[obj][:, None] * tint
    img += rng.normal(0, cfg.noise_sigma, size=img.shape)
    return np.clip(img, 0, 1), center


def plant_defect(
    img: np.ndarray, cfg: SynthConfig, center: tuple[int, int], rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Place a blob or scratch fully inside the object; returns (image, mask)."""
    s = cfg.image_size
    obj_r = cfg.object_fraction * s
    if cfg.defect == "blob":
        r = int(rng.integers(cfg.defect_radius[0], cfg.defect_radius[1] + 1))
        reach = obj_r - r - 1
        ang, dist = rng.uniform(0, 2 * np.pi), reach * np.sqrt(rng.uniform(0, 1))
        c = (int(round(center[0] + dist * np.sin(ang))), int(round(center[1] + dist * np.cos(ang))))
        mask = disk_mask((s, s), c, r)
    else:
        length = rng.uniform(*cfg.scratch_length)
        reach = obj_r - length / 2 - cfg.scratch_width - 1
        ang, dist = rng.uniform(0, 2 * np.pi), reach * np.sqrt(rng.uniform(0, 1))
        mid = np.array([center[0] + dist * np.sin(ang), center[1] + dist * np.cos(ang)])
        phi = rng.uniform(0, np.pi)
        half = 0.5 * length * np.array([np.sin(phi), np.cos(phi)])
        mask = segment_mask((s, s), mid - half, mid + half, cfg.scratch_width)
    out = img.copy()
    if cfg.defect_delta != 0:
        out[mask] = np.clip(out[mask] + cfg.defect_delta, 0, 1)
    return out, mask


def generate_synthetic_category(cfg: SynthConfig, rng_seed: int) -> DatasetIndex:
    """Write a seeded MVTec-style tree under ``cfg.root`` and scan it back."""
    cfg.validate()
    root = Path(cfg.root)
    try:
        for sub in ("train/good", "test/good", f"test/{cfg.defect}", f"ground_truth/{cfg.defect}"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset under {root}: {exc}") from exc

    seeds = np.random.SeedSequence(rng_seed).spawn(cfg.n_train + cfg.n_test_normal + cfg.n_test_anomalous)
    it = iter(seeds)
    for i in range(cfg.n_train):
        img, _ = render_normal(cfg, np.random.default_rng(next(it)))
        save_image(root / "train" / "good" / f"{i:03d}.png", img)
    for i in range(cfg.n_test_normal):
        img, _ = render_normal(cfg, np.random.default_rng(next(it)))
        save_image(root / "test" / "good" / f"{i:03d}.png", img)
    for i in range(cfg.n_test_anomalous):
        rng = np.random.default_rng(next(it))
        img, center = render_normal(cfg, rng)
        img, mask = plant_defect(img, cfg, center, rng)
        save_image(root / "test" / cfg.defect / f"{i:03d}.png", img)
        save_mask(root / "ground_truth" / cfg.defect / f"{i:03d}_mask.png", mask)
    return scan_dataset(root, cfg.category)
