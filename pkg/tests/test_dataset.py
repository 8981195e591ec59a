import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from cutswap.dataset import (
    DatasetError,
    SynthConfig,
    as_image,
    color_jitter,
    disk_mask,
    generate_synthetic_category,
    load_image,
    plant_defect,
    render_normal,
    resize_bilinear,
    save_image,
    save_mask,
    scan_dataset,
)

import oracles


def _write_raw(path, arr, mode=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode=mode).save(path)


def test_load_black_and_white(tmp_path):
    _write_raw(tmp_path / "b.png", np.zeros((2, 2, 3)))
    _write_raw(tmp_path / "w.png", np.full((1, 1, 3), 255))
    assert np.array_equal(load_image(tmp_path / "b.png"), np.zeros((2, 2, 3)))
    assert np.array_equal(load_image(tmp_path / "w.png"), np.ones((1, 1, 3)))


def test_load_midgray_scaling(tmp_path):
    _write_raw(tmp_path / "g.png", np.full((3, 3), 128), mode="L")
    img = load_image(tmp_path / "g.png")
    assert img.shape == (3, 3, 3)
    assert img[0, 0, 0] == 128 / 255
    assert abs(img[1, 2, 1] - 0.50196) < 1e-5


def test_load_rejects_rgba_and_missing(tmp_path):
    _write_raw(tmp_path / "a.png", np.zeros((4, 4, 4)), mode="RGBA")
    with pytest.raises(DatasetError):
        load_image(tmp_path / "a.png")
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "nope.png")


def test_as_image_checks():
    with pytest.raises(DatasetError):
        as_image(np.zeros((7, 8, 3)))
    with pytest.raises(DatasetError):
        as_image(np.full((8, 8, 3), 1.5))
    with pytest.raises(DatasetError):
        as_image(np.zeros((8, 8)))


def test_save_load_roundtrip_on_8bit_grid(tmp_path, rng):
    img = rng.integers(0, 256, size=(9, 11, 3)) / 255.0
    save_image(tmp_path / "x.png", img)
    assert np.array_equal(load_image(tmp_path / "x.png"), img)


def test_resize_identity_is_exact_copy(rng):
    img = rng.uniform(size=(10, 12, 3))
    out = resize_bilinear(img, 10, 12)
    assert np.array_equal(out, img) and out is not img


def test_resize_center_sample():
    img = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert resize_bilinear(img, 1, 1)[0, 0] == 0.5


def test_resize_matches_pointwise_oracle(rng):
    img = rng.uniform(size=(7, 5))
    out = resize_bilinear(img, 11, 3)
    rows = img.tolist()
    for i in range(11):
        for j in range(3):
            y = (i + 0.5) * 7 / 11 - 0.5
            x = (j + 0.5) * 5 / 3 - 0.5
            assert abs(out[i, j] - oracles.bilinear_at(rows, y, x)) < 1e-12


@given(
    st.floats(0, 1),
    st.integers(2, 20),
    st.integers(2, 20),
    st.integers(1, 40),
    st.integers(1, 40),
)
def test_resize_constant_roundtrip(v, h, w, oh, ow):
    img = np.full((h, w, 3), v)
    there = resize_bilinear(img, oh, ow)
    assert np.all(there == v)
    assert np.all(resize_bilinear(there, h, w) == v)


@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_jitter_stays_in_unit_range(seed, strength):
    img = np.random.default_rng(seed).uniform(size=(8, 8, 3))
    out = color_jitter(img, seed, strength)
    assert out.min() >= 0 and out.max() <= 1


def test_jitter_identity_determinism_and_zero(rng):
    img = rng.uniform(size=(8, 8, 3))
    assert np.array_equal(color_jitter(img, 3, 0.0), img)
    assert np.array_equal(color_jitter(img, 3, 0.4), color_jitter(img, 3, 0.4))
    assert not np.array_equal(color_jitter(img, 3, 0.4), color_jitter(img, 4, 0.4))
    assert np.array_equal(color_jitter(np.zeros((8, 8, 3)), 9, 1.0), np.zeros((8, 8, 3)))


def _tree(tmp_path, mask_size=(16, 16)):
    root = tmp_path / "cat"
    img = np.zeros((16, 16, 3))
    for i in range(3):
        save_image(root / "train" / "good" / f"{i}.png", img)
    for i in range(2):
        save_image(root / "test" / "good" / f"{i}.png", img)
        save_image(root / "test" / "crack" / f"c{i}.png", img)
        save_mask(root / "ground_truth" / "crack" / f"c{i}_mask.png", np.ones(mask_size, bool))
    return root


def test_scan_counts(tmp_path):
    idx = scan_dataset(_tree(tmp_path))
    assert len(idx.train_normals) == 3
    assert len(idx.test_items) == 4
    labels = sorted(t.label for t in idx.test_items)
    assert labels == [0, 0, 1, 1]
    assert all(t.mask_path is not None for t in idx.test_items if t.label == 1)
    idx.validate()
    again = scan_dataset(_tree(tmp_path))
    assert again == idx


def test_scan_empty_test_dir(tmp_path):
    root = tmp_path / "c"
    save_image(root / "train" / "good" / "0.png", np.zeros((8, 8, 3)))
    (root / "test").mkdir()
    assert scan_dataset(root).test_items == []


def test_mask_size_mismatch_fails_validation(tmp_path):
    idx = scan_dataset(_tree(tmp_path, mask_size=(8, 16)))
    with pytest.raises(DatasetError):
        idx.validate()


def test_missing_mask_is_a_warning(tmp_path):
    root = _tree(tmp_path)
    (root / "ground_truth" / "crack" / "c0_mask.png").unlink()
    idx = scan_dataset(root)
    item = next(t for t in idx.test_items if t.path.stem == "c0")
    assert item.label == 1 and item.mask_path is None
    assert idx.warnings


def test_synthetic_counts_and_determinism(tmp_path):
    cfg = SynthConfig(root=str(tmp_path / "a"), image_size=64, object_fraction=0.36, defect_radius=(3, 5))
    idx = generate_synthetic_category(cfg, 11)
    assert len(idx.train_normals) == 20
    assert sum(t.label == 0 for t in idx.test_items) == 10
    assert sum(t.mask_path is not None for t in idx.test_items) == 10
    cfg_b = SynthConfig(root=str(tmp_path / "b"), image_size=64, object_fraction=0.36, defect_radius=(3, 5))
    idx_b = generate_synthetic_category(cfg_b, 11)
    for p, q in zip(idx.train_normals + [t.path for t in idx.test_items],
                    idx_b.train_normals + [t.path for t in idx_b.test_items]):
        assert p.read_bytes() == q.read_bytes()


def test_zero_delta_defect_leaves_image_unchanged():
    cfg = SynthConfig(defect_delta=0.0)
    rng = np.random.default_rng(5)
    img, center = render_normal(cfg, rng)
    out, mask = plant_defect(img, cfg, center, rng)
    assert np.array_equal(out, img)
    assert mask.sum() > 0


@pytest.mark.parametrize("radius", [1, 2.5, 5, 7])
def test_disk_mask_matches_lattice_count(radius):
    m = disk_mask((40, 40), (20, 20), radius)
    assert m.sum() == oracles.disk_lattice_count(radius)


def test_blob_mask_is_a_lattice_disk():
    cfg = SynthConfig(defect_radius=(6, 6))
    rng = np.random.default_rng(2)
    img, center = render_normal(cfg, rng)
    _, mask = plant_defect(img, cfg, center, rng)
    assert mask.sum() == oracles.disk_lattice_count(6)


def test_synth_config_rejects_oversized_defect():
    with pytest.raises(ValueError):
        SynthConfig(image_size=32, object_fraction=0.1, defect_radius=(5, 9)).validate()
