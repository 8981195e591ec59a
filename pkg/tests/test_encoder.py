import math

import numpy as np
import pytest

from cutswap.augment import AugmentConfig
from cutswap.config import RunConfig
from cutswap.dataset import SynthConfig, render_normal
from cutswap.encoder import (
    Batch,
    CheckpointError,
    EncoderParams,
    HeadParams,
    TrainConfig,
    TrainingDiverged,
    backward,
    check_gradient_entries,
    checkpoint_bytes,
    classify,
    cross_entropy,
    encode,
    grad_check,
    init_encoder,
    init_head,
    load_checkpoint,
    loss_and_grads,
    loss_cs,
    parse_checkpoint,
    relative_error,
    save_checkpoint,
    softmax,
    train,
)
from cutswap.pipeline import AugmentationStream
from cutswap.saliency import builtin_multiscale_saliency

import oracles


def _toy(seed=0, dim=6, n_classes=2, channels=(2, 3, 4), hidden=(5,)):
    return init_encoder(seed, dim, channels), init_head(seed + 1, dim, n_classes, hidden)


def _batch(seed=0, n=3, size=8, n_classes=2):
    rng = np.random.default_rng(seed)
    return Batch(rng.uniform(size=(n, size, size, 3)), rng.integers(0, n_classes, size=n))


# forward

def test_zero_weights_give_zero_features(rng):
    enc = init_encoder(0)
    zero = EncoderParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in enc.convs],
                         np.zeros_like(enc.proj_w), np.zeros_like(enc.proj_b))
    assert np.array_equal(encode(zero, rng.uniform(size=(16, 16, 3))), np.zeros(64))


def test_encode_deterministic_and_size_check(rng):
    enc = init_encoder(3)
    img = rng.uniform(size=(16, 16, 3))
    assert np.array_equal(encode(enc, img), encode(enc, img.copy()))
    with pytest.raises(ValueError):
        encode(enc, img, expected_hw=(32, 32))


def _tap_bound(w):
    return sum(np.linalg.norm(w[:, :, i, j], 2) for i in range(3) for j in range(3))


def test_single_pixel_perturbation_bounded_by_operator_norms(rng):
    enc = init_encoder(9, dim=8, channels=(4, 4, 4))
    img = rng.uniform(size=(8, 8, 3))
    eps = 1e-3
    bound = eps * np.prod([_tap_bound(w) for w, _ in enc.convs]) * np.linalg.norm(enc.proj_w, 2)
    for r, c, ch in [(0, 0, 0), (3, 4, 1), (7, 7, 2)]:
        other = img.copy()
        other[r, c, ch] += eps
        change = np.linalg.norm(encode(enc, other) - encode(enc, img))
        assert 0 < change <= bound


def test_zero_head_and_identity_head():
    zero = HeadParams([(np.zeros((3, 4)), np.zeros(3))])
    assert np.array_equal(classify(zero, np.ones(4)), np.zeros(3))
    ident = HeadParams([(np.eye(3), np.zeros(3))])
    g = np.array([0.3, -1.2, 2.0])
    assert np.array_equal(classify(ident, g), g)


def test_toy_head_first_column_plus_bias():
    w = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    b = np.array([0.5, -0.5, 0.25])
    logits = classify(HeadParams([(w, b)]), np.array([1.0, 0.0]))
    assert logits.tolist() == [1.5, 2.5, 5.25]


# loss

def test_uniform_logits_give_log_c():
    assert abs(loss_cs(np.zeros(2), [np.zeros(2)]) - math.log(2)) < 1e-15
    assert abs(loss_cs(np.zeros(3), [np.zeros(3), np.zeros(3)], [1, 2]) - math.log(3)) < 1e-15


def test_known_binary_loss():
    loss, _ = cross_entropy(np.array([2.0, 0.0]), np.array([0]))
    assert abs(loss - math.log1p(math.exp(-2))) < 1e-15
    assert abs(loss - 0.1269) < 1e-4
    assert abs(loss - oracles.softmax_ce([2.0, 0.0], 0)) < 1e-15


def test_saturation_limit():
    loss, _ = cross_entropy(np.array([60.0, 0.0]), np.array([0]))
    assert 0 <= loss < 1e-25


def test_loss_cs_pairs_positive_with_each_negative():
    pos = np.array([1.0, 0.0])
    negs = [np.array([0.0, 2.0]), np.array([0.5, 0.5])]
    want = (2 * oracles.softmax_ce(pos.tolist(), 0) + oracles.softmax_ce([0.0, 2.0], 1)
            + oracles.softmax_ce([0.5, 0.5], 1)) / 4
    assert abs(loss_cs(pos, negs) - want) < 1e-15


@pytest.mark.parametrize("label", [0, 1, 2])
def test_softmax_gradient_identity(label):
    logits = np.array([0.3, -1.0, 2.2])
    _, d = cross_entropy(logits, np.array([label]))
    assert np.allclose(d[0], softmax(logits) - np.eye(3)[label], atol=1e-16)


def test_head_bias_gradient_is_softmax_minus_onehot():
    enc, head = _toy(n_classes=3)
    batch = _batch(n=1, n_classes=3)
    _, _, hg = loss_and_grads(enc, head, batch)
    logits = classify(head, encode(enc, batch.images[0]))
    assert np.allclose(hg.layers[-1][1], softmax(logits) - np.eye(3)[batch.labels[0]], atol=1e-15)


def test_duplicated_sample_gradient_equals_single():
    enc, head = _toy()
    one = _batch(n=1)
    two = Batch(np.concatenate([one.images, one.images]), np.concatenate([one.labels, one.labels]))
    e1, h1 = backward(enc, head, one)
    e2, h2 = backward(enc, head, two)
    for a, b in zip(e1.arrays() + h1.arrays(), e2.arrays() + h2.arrays()):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-18)


# gradient checking

def test_single_parameter_finite_difference():
    x = 0.7
    theta = [np.array([1.3])]

    def f():
        return cross_entropy(np.array([theta[0][0] * x, 0.0]), np.array([0]))[0]

    _, d = cross_entropy(np.array([theta[0][0] * x, 0.0]), np.array([0]))
    grad = [np.array([d[0, 0] * x])]
    assert check_gradient_entries(f, theta, grad, [(0, (0,))], 1e-5) < 1e-6


def test_linear_function_is_exact():
    rng = np.random.default_rng(4)
    w, x = rng.normal(size=5), rng.normal(size=5)
    params = [w]
    err = check_gradient_entries(lambda: float(params[0] @ x), params, [x.copy()], [(0, (i,)) for i in range(5)], 1e-4)
    assert err < 1e-8


def test_toy_network_grad_check():
    enc, head = _toy(n_classes=3)
    assert grad_check(enc, head, _batch(n=4, n_classes=3), eps=1e-4, n_checks=60) < 1e-4


def test_corrupted_gradient_is_flagged():
    enc, head = _toy()
    batch = _batch()

    def doubled(e, h, b):
        eg, hg = backward(e, h, b)
        eg.proj_w[0, 0] *= 2
        return eg, hg

    pick = [(2 * len(enc.convs), (0, 0))]
    clean = grad_check(enc, head, batch, picks=pick)
    bad = grad_check(enc, head, batch, picks=pick, grad_fn=doubled)
    assert clean < 1e-4
    # |2n - n| / |2n|
    assert abs(bad - 0.5) < 1e-3


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-10, 0.0) == pytest.approx(1e-2)


# training

class FixedSource:
    def __init__(self, batches):
        self.batches = batches

    def epoch_batches(self, epoch, batch_size):
        return self.batches


def test_zero_lr_keeps_parameters():
    enc, head = _toy()
    cfg = TrainConfig(learning_rate=0.0, epochs=3, dim=6, channels=(2, 3, 4), head_hidden=(5,), three_way=False)
    e2, h2, curve = train(FixedSource([_batch()]), cfg, enc, head)
    for a, b in zip(enc.arrays() + head.arrays(), e2.arrays() + h2.arrays()):
        assert np.array_equal(a, b)
    assert len(curve) == 3 and len(set(curve)) == 1


def test_divergence_reports_last_good_state():
    enc, head = _toy()
    bad = _batch()
    bad.images[0, 0, 0, 0] = np.inf
    cfg = TrainConfig(epochs=2, dim=6, channels=(2, 3, 4), head_hidden=(5,), three_way=False)
    with pytest.raises(TrainingDiverged) as info:
        train(FixedSource([bad]), cfg, enc, head)
    assert np.array_equal(info.value.encoder.proj_w, enc.proj_w)


def _stream(n_images, size=64, seed=0, three_way=True):
    synth = SynthConfig(image_size=size, defect_radius=(3, 5))
    rng = np.random.default_rng(seed)
    images = [render_normal(synth, rng)[0] for _ in range(n_images)]
    cfg = RunConfig()
    cfg.train.three_way = three_way
    stacks = [builtin_multiscale_saliency(img) for img in images]
    return AugmentationStream(images, stacks, cfg, seed)


def test_two_image_training_reduces_loss():
    cfg = TrainConfig(epochs=32)
    _, _, curve = train(_stream(2), cfg)
    assert curve[-1] < curve[0]


def test_training_is_bit_deterministic():
    cfg = TrainConfig(epochs=2)
    a = train(_stream(2), cfg)
    b = train(_stream(2), cfg)
    assert checkpoint_bytes(a[0], a[1]) == checkpoint_bytes(b[0], b[1])
    assert a[2] == b[2]


def _mean_cos(a, b, same=False):
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    s = a @ b.T
    if same:
        n = len(a)
        return (s.sum() - np.trace(s)) / (n * (n - 1))
    return s.mean()


def test_feature_separation_after_training():
    stream = _stream(8, seed=3)
    enc, _, _ = train(stream, TrainConfig(epochs=32))
    held = stream.samples(epoch=1000)
    pos = encode(enc, np.stack([s.positive for s in held]))
    neg = encode(enc, np.stack([p.negative for s in held for p in s.pairs]))
    assert _mean_cos(pos, pos, same=True) > _mean_cos(pos, neg)


# checkpoints

def test_checkpoint_roundtrip(tmp_path):
    enc, head = _toy()
    digest = save_checkpoint(tmp_path / "m.csw", enc, head)
    e2, h2 = load_checkpoint(tmp_path / "m.csw")
    assert len(digest) == 32
    for a, b in zip(enc.arrays() + head.arrays(), e2.arrays() + h2.arrays()):
        assert np.array_equal(a.astype(np.float32), b)


def test_checkpoint_corruption_detected():
    enc, head = _toy()
    data = checkpoint_bytes(enc, head)
    for bad in (data[:-3], data + b"\0", b"XXXX" + data[4:], data[:10]):
        with pytest.raises(CheckpointError):
            parse_checkpoint(bad)
