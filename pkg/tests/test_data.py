import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from splitmask.data import (
    AugmentPolicy,
    IngestionError,
    LabeledDataset,
    augment,
    export_image_folder,
    hflip,
    load_image_folder,
    patchify,
    patchify_batch,
    solarize,
    synth_generate,
    unpatchify,
)
from splitmask.numerics import DimensionError


def _write_ppm(path, size=32, seed=0):
    arr = np.random.default_rng(seed).integers(0, 256, (size, size, 3), dtype=np.uint8)
    Image.fromarray(arr).save(path, format="PPM")
    return arr


# --- ingestion ----------------------------------------------------------------


def test_empty_manifest(tmp_path):
    (tmp_path / "m.tsv").write_text("")
    ds = load_image_folder(tmp_path, "m.tsv", num_classes=3)
    assert len(ds) == 0


def test_single_ppm(tmp_path):
    arr = _write_ppm(tmp_path / "a.ppm")
    (tmp_path / "m.tsv").write_text("a.ppm\t1\n")
    ds = load_image_folder(tmp_path, "m.tsv", num_classes=2)
    assert len(ds) == 1
    img = ds.image(0)
    assert img.shape == (3, 32, 32)
    assert img.min() >= 0.0 and img.max() <= 1.0
    np.testing.assert_allclose(img, arr.transpose(2, 0, 1) / 255.0, atol=1e-7)


def test_missing_file_names_path_and_line(tmp_path):
    (tmp_path / "m.tsv").write_text("gone.png\t0\n")
    with pytest.raises(IngestionError, match=r"m\.tsv:1.*gone\.png"):
        load_image_folder(tmp_path, "m.tsv", num_classes=2)


def test_bad_label_and_undecodable(tmp_path):
    _write_ppm(tmp_path / "a.ppm")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    (tmp_path / "m.tsv").write_text("a.ppm\t5\n")
    with pytest.raises(IngestionError, match=":1"):
        load_image_folder(tmp_path, "m.tsv", num_classes=2)
    (tmp_path / "m.tsv").write_text("a.ppm\t0\njunk.png\t1\n")
    with pytest.raises(IngestionError, match=":2"):
        load_image_folder(tmp_path, "m.tsv", num_classes=2)


def test_export_then_load_round_trip(tmp_path):
    train, _ = synth_generate(3, 8, 0)
    export_image_folder(train, tmp_path, "train.tsv")
    back = load_image_folder(tmp_path, "train.tsv", num_classes=train.num_classes)
    assert [lab for _, lab in back.items] == [lab for _, lab in train.items]
    np.testing.assert_allclose(back.images(), train.images(), atol=1 / 255)


# --- synthetic data ------------------------------------------------------------


def test_synth_is_deterministic():
    a_train, a_test = synth_generate(11, 16, 8)
    b_train, b_test = synth_generate(11, 16, 8)
    assert a_train.images().tobytes() == b_train.images().tobytes()
    assert a_test.images().tobytes() == b_test.images().tobytes()
    c_train, _ = synth_generate(12, 16, 8)
    assert c_train.images().tobytes() != a_train.images().tobytes()


def test_synth_stratified_labels():
    train, test = synth_generate(0, 512, 64, num_classes=4)
    assert len(train) == 512
    assert np.bincount(train.labels, minlength=4).tolist() == [128] * 4
    assert train.split == "train" and test.split == "test"
    imgs = train.images()
    assert imgs.shape == (512, 3, 32, 32) and imgs.min() >= 0 and imgs.max() <= 1


def test_synth_train_and_test_do_not_share_images():
    train, test = synth_generate(0, 64, 64)
    tr = {im.tobytes() for im in train.images()}
    assert not any(im.tobytes() in tr for im in test.images())


def test_fraction_and_epoch_order():
    train, _ = synth_generate(0, 100, 0)
    half = train.fraction(0.5, seed=1)
    assert len(half) == 50
    assert np.bincount(half.labels, minlength=4).tolist() == [13, 13, 12, 12]
    np.testing.assert_array_equal(train.epoch_order(5, 2), train.epoch_order(5, 2))
    assert not np.array_equal(train.epoch_order(5, 2), train.epoch_order(5, 3))


def test_dataset_rejects_bad_labels():
    with pytest.raises(IngestionError):
        LabeledDataset([("x", 3)], num_classes=3)


# --- patches ---------------------------------------------------------------------


def test_patchify_desk_shape():
    seq = patchify(np.random.default_rng(0).random((3, 32, 32)).astype(np.float32), 8)
    assert seq.n == 16 and seq.d == 192 and seq.grid == (4, 4)


def test_patchify_single_patch():
    img = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
    seq = patchify(img, 16)
    assert seq.n == 1
    np.testing.assert_array_equal(seq.patches[0], img.reshape(-1))


def test_patchify_layout_is_row_major_channel_first():
    img = np.arange(3 * 4 * 6, dtype=np.float32).reshape(3, 4, 6)
    seq = patchify(img, 2)
    assert seq.grid == (2, 3)
    # patch (r=1, c=2) holds rows 2..3, cols 4..5 of every channel, channel-major
    np.testing.assert_array_equal(seq.patches[1 * 3 + 2], img[:, 2:4, 4:6].reshape(-1))


def test_patchify_indivisible():
    with pytest.raises(DimensionError):
        patchify(np.zeros((3, 10, 10), dtype=np.float32), 8)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]))
def test_patchify_round_trips(rows, cols, p):
    img = np.random.default_rng(rows * 10 + cols).random((3, rows * p, cols * p)).astype(np.float32)
    seq = patchify(img, p)
    np.testing.assert_array_equal(unpatchify(seq), img)
    np.testing.assert_array_equal(patchify(unpatchify(seq), p).patches, seq.patches)
    np.testing.assert_array_equal(patchify_batch(img[None], p)[0], seq.patches)


# --- augmentation ------------------------------------------------------------------


def test_flip_twice_is_identity():
    img = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(hflip(hflip(img)), img)
    forced = AugmentPolicy.named("basic", flip_p=1.0, crop_scale=(1.0, 1.0))
    assert forced.flip_p == 1.0


def test_solarize_threshold_zero_is_involution():
    img = np.random.default_rng(1).random((3, 8, 8)).astype(np.float32)
    np.testing.assert_allclose(solarize(solarize(img, 0.0), 0.0), img, atol=1e-7)


@pytest.mark.parametrize("policy", ["basic", "small_data"])
def test_augment_range_and_shape(policy):
    train, _ = synth_generate(0, 20, 0, size=40)
    rng = np.random.default_rng(0)
    for k in range(1000):
        out = augment(train.image(k % 20), policy, rng, 32)
        assert out.shape == (3, 32, 32)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_none_is_deterministic_resize():
    img = np.random.default_rng(2).random((3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(augment(img, "none", np.random.default_rng(0), 32), img)
    with pytest.raises(ValueError):
        AugmentPolicy.named("extreme")
