"""Save a contact sheet of one image's positive, saliency levels and negatives.

    python scripts/show_negatives.py --out negatives.png --seed 3

Top row: positive and the saliency map of each level. Bottom row: the
negative from each level with both swapped footprints outlined (red for
CutSwap, cyan for scars).
"""
import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from cutswap.augment import SCAR, augment_sample
from cutswap.config import load_config
from cutswap.dataset import render_normal, to_uint8
from cutswap.saliency import builtin_multiscale_saliency


def outline(img, patch, color):
    out = img.copy()
    r0, c0 = patch.top, patch.left
    r1, c1 = r0 + patch.height - 1, c0 + patch.width - 1
    out[r0, c0 : c1 + 1] = color
    out[r1, c0 : c1 + 1] = color
    out[r0 : r1 + 1, c0] = color
    out[r0 : r1 + 1, c1] = color
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("negatives.png"))
    args = ap.parse_args()

    cfg = load_config(None, args.overrides, args.seed)
    img, _ = render_normal(cfg.synth, np.random.default_rng(cfg.seed))
    s = cfg.saliency
    stack = builtin_multiscale_saliency(img, s.levels, s.total_levels, s.sigma_min, s.sigma_max)
    sample = augment_sample(img, stack, cfg.cluster.k, cfg.seed, cfg.augment, cfg.train.three_way)

    top = [sample.positive] + [np.repeat(m.data[:, :, None], 3, axis=2) for m in stack.maps]
    bottom = []
    for pair in sample.pairs:
        color = (0.0, 1.0, 1.0) if pair.label == SCAR else (1.0, 0.0, 0.0)
        neg = pair.negative
        for p in pair.patches:
            neg = outline(neg, p, color)
        bottom.append(neg)
    width = max(len(top), len(bottom))
    blank = np.zeros_like(sample.positive)
    rows = [np.concatenate(r + [blank] * (width - len(r)), axis=1) for r in (top, bottom)]
    Image.fromarray(to_uint8(np.concatenate(rows, axis=0))).save(args.out)
    for w in sample.warnings:
        print(w)
    print(f"wrote {args.out} ({len(sample.pairs)} negatives)")


if __name__ == "__main__":
    main()
