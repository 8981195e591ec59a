"""Brute-force reference computations, written independently of the package.

Everything here favours obviousness over speed: plain loops, exhaustive
enumeration, no shared helpers with ``cutswap``.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def kmeans_optimum(values, k: int) -> float:
    """Exact 1-D k-means inertia: optimal clusters are contiguous once sorted."""
    xs = sorted(float(v) for v in values)
    n = len(xs)
    k = min(k, n)

    def sse(chunk):
        m = sum(chunk) / len(chunk)
        return sum((v - m) ** 2 for v in chunk)

    best = math.inf
    for cuts in itertools.combinations(range(1, n), k - 1):
        bounds = (0, *cuts, n)
        total = sum(sse(xs[a:b]) for a, b in zip(bounds, bounds[1:]))
        best = min(best, total)
    return best


def kmeans_optimal_partition(values, k: int) -> list[list[float]]:
    xs = sorted(float(v) for v in values)
    n = len(xs)
    best, best_parts = math.inf, None
    for cuts in itertools.combinations(range(1, n), k - 1):
        bounds = (0, *cuts, n)
        parts = [xs[a:b] for a, b in zip(bounds, bounds[1:])]
        total = sum(sum((v - sum(p) / len(p)) ** 2 for v in p) for p in parts)
        if total < best - 1e-15:
            best, best_parts = total, parts
    return best_parts


def auc_trapezoid(scores, labels) -> float:
    """Sweep every distinct threshold from high to low and integrate the ROC.

    Tied scores enter together, which produces the diagonal ROC segment
    (half credit) that the trapezoid rule integrates.
    """
    pairs = sorted(zip((float(s) for s in scores), (int(bool(y)) for y in labels)), reverse=True)
    P = sum(y for _, y in pairs)
    N = len(pairs) - P
    tp = fp = 0
    tpr_prev = fpr_prev = 0.0
    area = 0.0
    i = 0
    while i < len(pairs):
        t = pairs[i][0]
        while i < len(pairs) and pairs[i][0] == t:
            if pairs[i][1]:
                tp += 1
            else:
                fp += 1
            i += 1
        tpr, fpr = tp / P, fp / N
        area += (fpr - fpr_prev) * (tpr + tpr_prev) / 2
        tpr_prev, fpr_prev = tpr, fpr
    return area


def auc_pairs(scores, labels) -> float:
    """O(n^2) pair count with half credit for ties."""
    pos = [float(s) for s, y in zip(scores, labels) if y]
    neg = [float(s) for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def nearest_bruteforce(queries, bank) -> list[float]:
    return [min(math.dist(q, b) for b in bank) for q in queries]


def covering_radius(points: np.ndarray, centers_idx) -> float:
    return max(min(math.dist(p, points[c]) for c in centers_idx) for p in points)


def optimal_kcenter_radius(points: np.ndarray, k: int) -> float:
    """Exhaustive k-center: best covering radius over all C(n, k) center sets."""
    pts = np.asarray(points, dtype=np.float64)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    combos = np.array(list(itertools.combinations(range(len(pts)), k)))
    # (n, n_combos): distance from each point to its nearest center in each combo
    radii = d[:, combos].min(axis=2).max(axis=0)
    return float(radii.min())


def disk_lattice_count(radius: float) -> int:
    r = int(math.ceil(radius))
    return sum(1 for i in range(-r, r + 1) for j in range(-r, r + 1) if i * i + j * j <= radius * radius)


def gradient_magnitude_loops(gray) -> np.ndarray:
    """Central differences inside, one-sided at the border, per pixel."""
    g = [[float(v) for v in row] for row in np.asarray(gray)]
    h, w = len(g), len(g[0])
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            if i == 0:
                dy = g[1][j] - g[0][j]
            elif i == h - 1:
                dy = g[h - 1][j] - g[h - 2][j]
            else:
                dy = (g[i + 1][j] - g[i - 1][j]) / 2
            if j == 0:
                dx = g[i][1] - g[i][0]
            elif j == w - 1:
                dx = g[i][w - 1] - g[i][w - 2]
            else:
                dx = (g[i][j + 1] - g[i][j - 1]) / 2
            out[i, j] = math.sqrt(dx * dx + dy * dy)
    return out


def bilinear_at(img2d, y: float, x: float) -> float:
    """Bilinear sample of a 2-D array at continuous coordinates (clamped)."""
    h, w = len(img2d), len(img2d[0])
    y = min(max(y, 0.0), h - 1)
    x = min(max(x, 0.0), w - 1)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    top = img2d[y0][x0] * (1 - fx) + img2d[y0][x1] * fx
    bot = img2d[y1][x0] * (1 - fx) + img2d[y1][x1] * fx
    return top * (1 - fy) + bot * fy


def softmax_ce(logits, label: int) -> float:
    m = max(logits)
    z = sum(math.exp(v - m) for v in logits)
    return -(logits[label] - m - math.log(z))
