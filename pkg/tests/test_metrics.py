import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from cutswap.metrics import MetricsRow, pixel_auc, roc_auc, write_metrics_csv

import oracles


@st.composite
def scored_sets(draw, max_n=40, ties=True):
    n = draw(st.integers(2, max_n))
    labels = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    assume(0 < sum(labels) < n)
    if ties:
        scores = draw(st.lists(st.integers(0, 6), min_size=n, max_size=n))
        scores = [s / 4 for s in scores]
    else:
        # spaced so the transforms below stay strictly increasing in floating point
        scores = draw(st.lists(st.integers(-100_000, 100_000), min_size=n, max_size=n, unique=True))
        scores = [v / 1000 for v in scores]
    return np.array(scores, dtype=float), np.array(labels)


def test_perfect_and_uninformative():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_small_cases_against_threshold_sweep():
    s = [0.1, 0.4, 0.35, 0.8]
    assert roc_auc(s, [0, 1, 0, 1]) == 1.0
    for labels in ([0, 0, 1, 1], [1, 0, 1, 0], [0, 1, 1, 0]):
        assert abs(roc_auc(s, labels) - oracles.auc_trapezoid(s, labels)) < 1e-12
    assert roc_auc(s, [0, 0, 1, 1]) == 0.75


def test_requires_both_classes():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


@given(scored_sets())
def test_rank_statistic_equals_oracles(case):
    s, y = case
    got = roc_auc(s, y)
    assert abs(got - oracles.auc_trapezoid(s, y)) < 1e-12
    assert abs(got - oracles.auc_pairs(s, y)) < 1e-12


@given(scored_sets(ties=False))
def test_monotone_invariance_and_negation(case):
    s, y = case
    a = roc_auc(s, y)
    assert roc_auc(np.exp(s / 50), y) == a
    assert roc_auc(3 * s + 7, y) == a
    assert roc_auc(-s, y) + a == 1.0


def test_pixel_auc_cases():
    masks = [np.array([[0, 1], [0, 0]]), np.array([[1, 1], [0, 0]])]
    assert pixel_auc([m.astype(float) for m in masks], masks) == 1.0
    assert pixel_auc([np.full((2, 2), 0.2), np.full((2, 2), 0.2)], masks) == 0.5
    heat = [np.array([[0.1, 0.7], [0.3, 0.2]]), np.array([[0.6, 0.25], [0.3, 0.05]])]
    flat_s = np.concatenate([h.ravel() for h in heat])
    flat_y = np.concatenate([m.ravel() for m in masks])
    assert abs(pixel_auc(heat, masks) - oracles.auc_pairs(flat_s, flat_y)) < 1e-15


def test_per_image_pooling_skips_one_class_images():
    masks = [np.array([[0, 1], [0, 0]]), np.zeros((2, 2), int)]
    heat = [np.array([[0.0, 1.0], [0.5, 0.2]]), np.ones((2, 2))]
    assert pixel_auc(heat, masks, "per-image") == 1.0
    assert pixel_auc(heat, masks, "global") < 1.0
    with pytest.raises(ValueError):
        pixel_auc(heat, masks, "median")


def test_shape_mismatch():
    with pytest.raises(ValueError):
        pixel_auc([np.zeros((2, 2))], [np.zeros((3, 2))])


def test_metrics_csv_format(tmp_path):
    write_metrics_csv(tmp_path / "m.csv", [MetricsRow("synthetic", 0.01, 0.9125, 1.0, 20, 0)])
    assert (tmp_path / "m.csv").read_text() == (
        "category,coreset_ratio,image_auc,pixel_auc,n_test,seed\n"
        "synthetic,0.010000,0.912500,1.000000,20,0\n"
    )
