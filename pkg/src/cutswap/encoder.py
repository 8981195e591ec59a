"""Compact convolutional feature extractor and classification head.

Everything is plain numpy with hand-written reverse-mode gradients: three
stride-2 3x3 convolutions with softplus, global average pooling, a linear
projection to the feature dimension, and a small MLP head on top.

Softplus rather than a hard ReLU keeps the loss smooth, so central
differences at eps=1e-4 agree with the analytic gradients; with ReLU, kink
crossings inside the difference interval dominate the comparison.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CSW1"


class TrainingDiverged(RuntimeError):
    def __init__(self, message, encoder=None, head=None, curve=None):
        super().__init__(message)
        self.encoder = encoder
        self.head = head
        self.curve = curve or []


@dataclass
class EncoderParams:
    convs: list[tuple[np.ndarray, np.ndarray]]  # (out, in, 3, 3), (out,)
    proj_w: np.ndarray  # (D, C_last)
    proj_b: np.ndarray  # (D,)

    @property
    def dim(self) -> int:
        return self.proj_w.shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.convs:
            out += [w, b]
        return out + [self.proj_w, self.proj_b]

    def names(self) -> list[str]:
        out = []
        for i in range(len(self.convs)):
            out += [f"conv{i}.w", f"conv{i}.b"]
        return out + ["proj.w", "proj.b"]

    def copy(self) -> EncoderParams:
        return EncoderParams([(w.copy(), b.copy()) for w, b in self.convs], self.proj_w.copy(), self.proj_b.copy())


@dataclass
class HeadParams:
    layers: list[tuple[np.ndarray, np.ndarray]]  # (out, in), (out,); softplus between

    @property
    def n_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [a for wb in self.layers for a in wb]

    def names(self) -> list[str]:
        return [f"head{i}.{s}" for i in range(len(self.layers)) for s in ("w", "b")]

    def copy(self) -> HeadParams:
        return HeadParams([(w.copy(), b.copy()) for w, b in self.layers])


@dataclass
class Batch:
    images: np.ndarray  # (N, H, W, 3)
    labels: np.ndarray  # (N,) int
    weights: np.ndarray | None = None  # (N,), defaults to uniform

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.weights is None:
            self.weights = np.ones(len(self.labels))
        if len(self.images) == 0:
            raise ValueError("empty batch")


@dataclass
class TrainConfig:
    learning_rate: float = 0.03
    epochs: int = 32
    batch_size: int = 4
    seed: int = 0
    three_way: bool = True
    dim: int = 64
    channels: tuple[int, ...] = (8, 16, 32)
    head_hidden: tuple[int, ...] = (64,)

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dim < 2:
            raise ValueError("feature dimension must be >= 2")

    @property
    def n_classes(self) -> int:
        return 3 if self.three_way else 2


# ---------------------------------------------------------------------------
# initialisation

def _uniform(rng, shape, fan_in):
    s = fan_in ** -0.5
    return rng.uniform(-s, s, size=shape)


def init_encoder(seed: int, dim: int = 64, channels: Sequence[int] = (8, 16, 32)) -> EncoderParams:
    rng = np.random.default_rng(seed)
    convs = []
    c_in = 3
    for c_out in channels:
        fan = c_in * 9
        convs.append((_uniform(rng, (c_out, c_in, 3, 3), fan), _uniform(rng, (c_out,), fan)))
        c_in = c_out
    return EncoderParams(convs, _uniform(rng, (dim, c_in), c_in), _uniform(rng, (dim,), c_in))


def init_head(seed: int, dim: int, n_classes: int = 2, hidden: Sequence[int] = (64,)) -> HeadParams:
    rng = np.random.default_rng(seed)
    sizes = [dim, *hidden, n_classes]
    return HeadParams(
        [(_uniform(rng, (o, i), i), _uniform(rng, (o,), i)) for i, o in zip(sizes[:-1], sizes[1:])]
    )


# ---------------------------------------------------------------------------
# layers

def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _conv_out(n: int) -> int:
    return (n + 1) // 2  # 3x3, stride 2, pad 1


def conv_s2_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 stride-2 convolution with one pixel of zero padding. x: (N, C, H, W)."""
    n, c, h, wd = x.shape
    ho, wo = _conv_out(h), _conv_out(wd)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], ho, wo))
    for ki in range(3):
        for kj in range(3):
            tap = xp[:, :, ki : ki + 2 * ho : 2, kj : kj + 2 * wo : 2]
            out += np.einsum("nchw,oc->nohw", tap, w[:, :, ki, kj], optimize=True)
    return out + b[None, :, None, None]


def conv_s2_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray):
    n, c, h, wd = x.shape
    ho, wo = dout.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for ki in range(3):
        for kj in range(3):
            sl = (slice(None), slice(None), slice(ki, ki + 2 * ho, 2), slice(kj, kj + 2 * wo, 2))
            dw[:, :, ki, kj] = np.einsum("nohw,nchw->oc", dout, xp[sl], optimize=True)
            dxp[sl] += np.einsum("nohw,oc->nchw", dout, w[:, :, ki, kj], optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    return dxp[:, :, 1 : 1 + h, 1 : 1 + wd], dw, db


def _to_nchw(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got {images.shape}")
    return images.transpose(0, 3, 1, 2)


def encoder_forward(params: EncoderParams, images: np.ndarray):
    x = _to_nchw(images)
    cache = {"acts": [x], "pre": []}
    for w, b in params.convs:
        z = conv_s2_forward(x, w, b)
        x = softplus(z)
        cache["pre"].append(z)
        cache["acts"].append(x)
    pooled = x.mean(axis=(2, 3))
    cache["pooled"] = pooled
    g = pooled @ params.proj_w.T + params.proj_b
    return g, cache


def encoder_backward(params: EncoderParams, cache, dg: np.ndarray) -> EncoderParams:
    pooled = cache["pooled"]
    d_proj_w = dg.T @ pooled
    d_proj_b = dg.sum(axis=0)
    dpooled = dg @ params.proj_w
    last = cache["acts"][-1]
    dx = np.broadcast_to(dpooled[:, :, None, None] / (last.shape[2] * last.shape[3]), last.shape)
    grads = []
    for i in range(len(params.convs) - 1, -1, -1):
        w, _ = params.convs[i]
        dz = dx * sigmoid(cache["pre"][i])
        dx, dw, db = conv_s2_backward(cache["acts"][i], w, dz)
        grads.append((dw, db))
    return EncoderParams(grads[::-1], d_proj_w, d_proj_b)


def head_forward(head: HeadParams, g: np.ndarray):
    x = np.atleast_2d(g)
    if x.shape[1] != head.in_dim:
        raise ValueError(f"feature dimension {x.shape[1]} does not match head input {head.in_dim}")
    acts, pres = [x], []
    for i, (w, b) in enumerate(head.layers):
        z = x @ w.T + b
        pres.append(z)
        x = softplus(z) if i < len(head.layers) - 1 else z
        acts.append(x)
    return x, (acts, pres)


def head_backward(head: HeadParams, cache, dlogits: np.ndarray):
    acts, pres = cache
    grads = []
    d = dlogits
    for i in range(len(head.layers) - 1, -1, -1):
        w, _ = head.layers[i]
        if i < len(head.layers) - 1:
            d = d * sigmoid(pres[i])
        grads.append((d.T @ acts[i], d.sum(axis=0)))
        d = d @ w
    return HeadParams(grads[::-1]), d


# ---------------------------------------------------------------------------
# public forward API

def encode(params: EncoderParams, img: np.ndarray, expected_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Feature vector(s) for one HxWx3 image or an (N, H, W, 3) stack."""
    arr = np.asarray(img)
    if expected_hw is not None and arr.shape[-3:-1] != tuple(expected_hw):
        raise ValueError(f"image size {arr.shape[-3:-1]} does not match working resolution {expected_hw}")
    g, _ = encoder_forward(params, arr)
    return g[0] if arr.ndim == 3 else g


def classify(head: HeadParams, g: np.ndarray) -> np.ndarray:
    logits, _ = head_forward(head, g)
    return logits[0] if np.ndim(g) == 1 else logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None):
    """Weighted mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ValueError(f"labels {labels} invalid for {logits.shape[1]} classes")
    w = np.ones(len(labels)) if weights is None else np.asarray(weights, dtype=np.float64)
    lsm = log_softmax(logits)
    per = -lsm[np.arange(len(labels)), labels]
    total = w.sum()
    loss = float((w * per).sum() / total)
    onehot = np.eye(logits.shape[1])[labels]
    dlogits = (np.exp(lsm) - onehot) * (w / total)[:, None]
    return loss, dlogits


def loss_cs(logits_pos, logits_neg_list, neg_labels=None) -> float:
    """Mean cross-entropy over each (positive, negative) pair.

    A positive shared by several negatives counts once per pair. Negatives
    default to the CutSwap class; pass ``neg_labels`` for scar negatives.
    """
    pos = np.atleast_2d(logits_pos)
    negs = np.atleast_2d(np.asarray(logits_neg_list, dtype=np.float64))
    if neg_labels is None:
        neg_labels = np.ones(len(negs), dtype=np.int64)
    if len(negs) == 0:
        return cross_entropy(pos, np.zeros(len(pos), dtype=np.int64))[0]
    logits = np.concatenate([np.repeat(pos, len(negs), axis=0), negs])
    labels = np.concatenate([np.zeros(len(negs), dtype=np.int64), np.asarray(neg_labels)])
    return cross_entropy(logits, labels)[0]


# ---------------------------------------------------------------------------
# gradients

def loss_and_grads(enc: EncoderParams, head: HeadParams, batch: Batch):
    g, ecache = encoder_forward(enc, batch.images)
    logits, hcache = head_forward(head, g)
    loss, dlogits = cross_entropy(logits, batch.labels, batch.weights)
    hgrads, dg = head_backward(head, hcache, dlogits)
    egrads = encoder_backward(enc, ecache, dg)
    return loss, egrads, hgrads


def backward(enc: EncoderParams, head: HeadParams, batch: Batch):
    loss, egrads, hgrads = loss_and_grads(enc, head, batch)
    for arr in egrads.arrays() + hgrads.arrays():
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite gradient")
    return egrads, hgrads


def loss_value(enc: EncoderParams, head: HeadParams, batch: Batch) -> float:
    g, _ = encoder_forward(enc, batch.images)
    logits, _ = head_forward(head, g)
    return cross_entropy(logits, batch.labels, batch.weights)[0]


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def check_gradient_entries(
    f: Callable[[], float],
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    picks: Sequence[tuple[int, tuple]],
    eps: float,
) -> float:
    """Worst relative error between ``grads`` and central differences of ``f``.

    ``params`` are perturbed in place and restored.
    """
    worst = 0.0
    for ai, idx in picks:
        arr = params[ai]
        old = arr[idx]
        arr[idx] = old + eps
        fp = f()
        arr[idx] = old - eps
        fm = f()
        arr[idx] = old
        numeric = (fp - fm) / (2 * eps)
        worst = max(worst, relative_error(float(grads[ai][idx]), numeric))
    return worst


def sample_entries(arrays: Sequence[np.ndarray], count: int, seed: int) -> list[tuple[int, tuple]]:
    """``count`` random entries, at least one from every array."""
    rng = np.random.default_rng(seed)
    picks = []
    for ai, a in enumerate(arrays):
        picks.append((ai, tuple(int(i) for i in np.unravel_index(rng.integers(a.size), a.shape))))
    sizes = np.array([a.size for a in arrays], dtype=np.float64)
    for _ in range(max(0, count - len(arrays))):
        ai = int(rng.choice(len(arrays), p=sizes / sizes.sum()))
        a = arrays[ai]
        picks.append((ai, tuple(int(i) for i in np.unravel_index(rng.integers(a.size), a.shape))))
    return picks


def grad_check(
    enc: EncoderParams,
    head: HeadParams,
    batch: Batch,
    eps: float = 1e-4,
    n_checks: int = 40,
    seed: int = 0,
    grad_fn=None,
    picks=None,
) -> float:
    if eps <= 0:
        raise ValueError("eps must be positive")
    grad_fn = grad_fn or backward
    egrads, hgrads = grad_fn(enc, head, batch)
    params = enc.arrays() + head.arrays()
    grads = egrads.arrays() + hgrads.arrays()
    if picks is None:
        picks = sample_entries(params, n_checks, seed)
    return check_gradient_entries(lambda: loss_value(enc, head, batch), params, grads, picks, eps)


# ---------------------------------------------------------------------------
# training

class PairSource(Protocol):
    def epoch_batches(self, epoch: int, batch_size: int) -> list[Batch]: ...


def sgd_step(params: EncoderParams | HeadParams, grads, lr: float) -> None:
    for p, g in zip(params.arrays(), grads.arrays()):
        p -= lr * g


def train(
    source: PairSource,
    cfg: TrainConfig,
    encoder: EncoderParams | None = None,
    head: HeadParams | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
):
    """Plain SGD on the pair classification objective.

    Returns (encoder, head, per-epoch mean loss). On a non-finite loss the
    run aborts with :class:`TrainingDiverged` carrying the last good state.
    """
    cfg.validate()
    enc = encoder.copy() if encoder is not None else init_encoder(cfg.seed, cfg.dim, cfg.channels)
    hd = head.copy() if head is not None else init_head(cfg.seed + 1, cfg.dim, cfg.n_classes, cfg.head_hidden)
    curve: list[float] = []
    for epoch in range(cfg.epochs):
        losses, weights = [], []
        for batch in source.epoch_batches(epoch, cfg.batch_size):
            good = (enc.copy(), hd.copy())
            loss, egrads, hgrads = loss_and_grads(enc, hd, batch)
            finite = np.isfinite(loss) and all(
                np.all(np.isfinite(a)) for a in egrads.arrays() + hgrads.arrays()
            )
            if not finite:
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", good[0], good[1], curve)
            if cfg.learning_rate > 0:
                sgd_step(enc, egrads, cfg.learning_rate)
                sgd_step(hd, hgrads, cfg.learning_rate)
            losses.append(loss)
            weights.append(len(batch.labels))
        mean = float(np.average(losses, weights=weights)) if losses else float("nan")
        curve.append(mean)
        log.info("epoch %d loss %.5f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return enc, hd, curve


# ---------------------------------------------------------------------------
# checkpoints

def checkpoint_bytes(enc: EncoderParams, head: HeadParams) -> bytes:
    arrays = enc.arrays() + head.arrays()
    header = [len(enc.convs), len(head.layers), len(arrays)]
    for a in arrays:
        header += [a.ndim, *a.shape]
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    return CHECKPOINT_MAGIC + struct.pack(f"<{len(header)}I", *header) + body


def checkpoint_digest(enc: EncoderParams, head: HeadParams) -> bytes:
    return hashlib.sha256(checkpoint_bytes(enc, head)).digest()


def save_checkpoint(path, enc: EncoderParams, head: HeadParams) -> bytes:
    data = checkpoint_bytes(enc, head)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).digest()


class CheckpointError(ValueError):
    pass


def parse_checkpoint(data: bytes) -> tuple[EncoderParams, HeadParams]:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    off = 4

    def u32():
        nonlocal off
        if off + 4 > len(data):
            raise CheckpointError("truncated checkpoint header")
        (v,) = struct.unpack_from("<I", data, off)
        off += 4
        return v

    n_conv, n_head, n_arr = u32(), u32(), u32()
    if n_arr != 2 * (n_conv + 1 + n_head):
        raise CheckpointError("inconsistent tensor count")
    shapes = []
    for _ in range(n_arr):
        nd = u32()
        shapes.append(tuple(u32() for _ in range(nd)))
    arrays = []
    for shp in shapes:
        n = int(np.prod(shp))
        if off + 4 * n > len(data):
            raise CheckpointError("truncated checkpoint body")
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shp).astype(np.float64))
        off += 4 * n
    if off != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    it = iter(arrays)
    convs = [(next(it), next(it)) for _ in range(n_conv)]
    enc = EncoderParams(convs, next(it), next(it))
    head = HeadParams([(next(it), next(it)) for _ in range(n_head)])
    return enc, head


def load_checkpoint(path) -> tuple[EncoderParams, HeadParams]:
    return parse_checkpoint(Path(path).read_bytes())


def round_to_f32(enc: EncoderParams, head: HeadParams) -> tuple[EncoderParams, HeadParams]:
    """The parameters exactly as a checkpoint would store them."""
    return parse_checkpoint(checkpoint_bytes(enc, head))
