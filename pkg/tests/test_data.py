import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from latentmim.data import (
    augment,
    augment_seed,
    batches_per_epoch,
    epoch_batch,
    hflip,
    ingest,
    load_image_folder,
    make_synthetic,
    normalize,
    random_resized_crop_box,
    write_image_folder,
)
from latentmim.errors import ConfigError


def _img(h=40, w=50, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)


def test_flip_twice_with_same_seed_is_identical():
    img = _img()
    a = augment(img, 16, np.random.default_rng(augment_seed(0, 1, 2)), (0, 0, 0), (1, 1, 1))
    b = augment(img, 16, np.random.default_rng(augment_seed(0, 1, 2)), (0, 0, 0), (1, 1, 1))
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(hflip(hflip(img)), img)


@settings(max_examples=50, deadline=None)
@given(h=st.integers(8, 80), w=st.integers(8, 80), res=st.sampled_from([8, 16, 32]), seed=st.integers(0, 10_000))
def test_crop_output_is_resolution_square(h, w, res, seed):
    out = augment(_img(h, w, seed % 7), res, np.random.default_rng(seed), (0, 0, 0), (1, 1, 1))
    assert out.shape == (3, res, res)


@settings(max_examples=200, deadline=None)
@given(h=st.integers(4, 300), w=st.integers(4, 300), seed=st.integers(0, 10_000))
def test_crop_box_within_bounds(h, w, seed):
    top, left, ch, cw = random_resized_crop_box(h, w, np.random.default_rng(seed))
    assert 0 <= top and top + ch <= h and 0 <= left and left + cw <= w and ch > 0 and cw > 0


def test_crop_box_respects_scale_and_ratio():
    rng = np.random.default_rng(0)
    for _ in range(200):
        _, _, h, w = random_resized_crop_box(224, 224, rng)
        assert 0.2 * 224 * 224 * 0.9 <= h * w <= 224 * 224
        assert 3 / 4 * 0.85 <= w / h <= 4 / 3 * 1.15


def test_identity_normalization():
    img = _img()
    out = normalize(img, (0, 0, 0), (1, 1, 1))
    np.testing.assert_array_equal(out, img.transpose(2, 0, 1).astype(np.float32) / 255)


def test_load_folder_skips_undecodable(tmp_path, caplog):
    data = make_synthetic(6, 16, seed=0)
    write_image_folder(data, tmp_path)
    (tmp_path / "class0" / "broken.png").write_bytes(b"not an image")
    with caplog.at_level(logging.WARNING):
        loaded = load_image_folder(tmp_path)
    assert len(loaded) == 6 and loaded.skipped == 1
    assert "broken.png" in caplog.text
    assert sorted(set(loaded.labels.tolist())) == [0, 1, 2, 3]
    np.testing.assert_array_equal(loaded.images[0], data.images[0])


def test_empty_directory_is_a_startup_error(tmp_path):
    with pytest.raises(ConfigError, match="no images"):
        load_image_folder(tmp_path)
    with pytest.raises(ConfigError, match="not a directory"):
        load_image_folder(tmp_path / "missing")


def test_ingest_stream_is_deterministic(tmp_path):
    write_image_folder(make_synthetic(10, 16, seed=0), tmp_path)
    a = [b.images for b in ingest(tmp_path, 16, seed=3, batch_size=4, epoch=1)]
    b = [b.images for b in ingest(tmp_path, 16, seed=3, batch_size=4, epoch=1)]
    c = [b.images for b in ingest(tmp_path, 16, seed=3, batch_size=4, epoch=2)]
    assert len(a) == batches_per_epoch(10, 4) == 2
    assert all(x.equal(y) for x, y in zip(a, b))
    assert not all(x.equal(y) for x, y in zip(a, c))


def test_epoch_batches_cover_distinct_images():
    data = make_synthetic(20, 16, seed=0)
    seen = np.concatenate([epoch_batch(data, 0, b, 5, 16, 0, (0, 0, 0), (1, 1, 1)).indices for b in range(4)])
    assert sorted(seen.tolist()) == list(range(20))


def test_synthetic_set_is_labeled_and_seeded():
    a, b = make_synthetic(8, 32, seed=1), make_synthetic(8, 32, seed=1)
    assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))
    assert a.labels.tolist() == [0, 1, 2, 3, 0, 1, 2, 3]
    assert a.images[0].shape == (32, 32, 3) and a.images[0].dtype == np.uint8
