import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaprune.config import CIFAR_MEAN, CIFAR_STD
from metaprune.data import (
    DataFormatError,
    Dataset,
    augment_batch,
    batches,
    flip,
    load_cifar_binary,
    pad_crop,
    split_holdout,
    synth_blobs,
)


def write_records(path, labels, pixel=None, rng=None):
    rows = []
    for lab in labels:
        px = np.full(3072, pixel, dtype=np.uint8) if pixel is not None else rng.integers(0, 256, 3072, dtype=np.uint8)
        rows.append(bytes([lab]) + px.tobytes())
    path.write_bytes(b"".join(rows))


def test_cifar_single_record(tmp_path):
    path = tmp_path / "one.bin"
    write_records(path, [3], pixel=255)
    ds = load_cifar_binary(path)
    assert len(ds) == 1 and ds.labels[0] == 3
    assert ds.images.shape == (1, 3, 32, 32)
    assert np.all(ds.images == 1.0)


def test_cifar_planar_layout(tmp_path):
    raw = bytearray([7])
    raw += bytes([10] * 1024 + [20] * 1024 + [30] * 1024)
    path = tmp_path / "planes.bin"
    path.write_bytes(bytes(raw))
    ds = load_cifar_binary(path)
    np.testing.assert_allclose(ds.images[0, :, 5, 9], np.array([10, 20, 30]) / 255.0)


def test_cifar_normalization(tmp_path):
    path = tmp_path / "one.bin"
    write_records(path, [0], pixel=255)
    ds = load_cifar_binary(path, normalize=(CIFAR_MEAN, CIFAR_STD))
    expected = (1.0 - np.array(CIFAR_MEAN)) / np.array(CIFAR_STD)
    np.testing.assert_allclose(ds.images[0, :, 0, 0], expected)


def test_cifar_multiple_files(tmp_path):
    rng = np.random.default_rng(0)
    paths = []
    for i in range(5):
        p = tmp_path / f"data_batch_{i + 1}.bin"
        write_records(p, rng.integers(0, 10, 20), rng=rng)
        paths.append(p)
    assert len(load_cifar_binary(paths)) == 100


def test_cifar_errors(tmp_path):
    path = tmp_path / "trunc.bin"
    write_records(path, [1, 2], pixel=0)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(DataFormatError, match="multiple"):
        load_cifar_binary(path)
    bad = tmp_path / "label.bin"
    write_records(bad, [10], pixel=0)
    with pytest.raises(DataFormatError, match="label"):
        load_cifar_binary(bad)


def test_synth_noise_free_nearest_prototype():
    ds = synth_blobs(6, 30, (3, 8, 8), seed=1, noise=0.0)
    protos = np.stack([ds.images[ds.labels == k][0] for k in range(6)])
    d = ((ds.images[:, None] - protos[None]) ** 2).sum(axis=(2, 3, 4))
    assert np.mean(d.argmin(axis=1) == ds.labels) == 1.0


def test_synth_deterministic_and_balanced():
    a = synth_blobs(5, 40, seed=3)
    b = synth_blobs(5, 40, seed=3)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert np.all(a.class_counts() == 40)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0


def test_split_holdout_counts():
    ds = Dataset(np.zeros((100 * 60, 1, 1, 1)), np.repeat(np.arange(100), 60), 100)
    _, val = split_holdout(ds, 50)
    assert len(val) == 5000
    train, val = split_holdout(ds, 0)
    assert len(val) == 0 and len(train) == len(ds)
    with pytest.raises(ValueError):
        split_holdout(ds, 61)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 20), st.integers(0, 2**31 - 1), st.data())
def test_split_is_partition(classes, per_class, seed, data):
    holdout = data.draw(st.integers(0, per_class))
    ds = synth_blobs(classes, per_class, (1, 2, 2), seed=seed)
    ids = np.arange(len(ds), dtype=np.float64).reshape(-1, 1, 1, 1)
    tagged = Dataset(ids, ds.labels, classes)
    train, val = split_holdout(tagged, holdout, seed=seed)
    a, b = train.images.ravel(), val.images.ravel()
    assert not set(a) & set(b)
    assert sorted(np.concatenate([a, b])) == list(range(len(ds)))
    assert np.all(val.class_counts() == holdout)


def test_batches_deterministic_and_short_tail():
    ds = synth_blobs(3, 10, (3, 8, 8), seed=0)
    a = list(batches(ds, 8, "none", seed=4, epoch=1))
    b = list(batches(ds, 8, "none", seed=4, epoch=1))
    assert [x.shape[0] for x, _ in a] == [8, 8, 8, 6]
    for (xa, ya), (xb, yb) in zip(a, b):
        np.testing.assert_array_equal(xa, xb)
        np.testing.assert_array_equal(ya, yb)
    c = list(batches(ds, 8, "none", seed=4, epoch=2))
    assert not np.array_equal(a[0][1], c[0][1]) or not np.array_equal(a[0][0], c[0][0])


def test_flip_involution_and_pad_crop_shape():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3, 8, 8))
    np.testing.assert_array_equal(flip(flip(x)), x)
    assert pad_crop(x[0], 4, 2, 5).shape == x[0].shape
    np.testing.assert_array_equal(pad_crop(x[0], 4, 4, 4), x[0])
    for mode in ("none", "flip", "pad4crop", "flip+pad4crop"):
        assert augment_batch(x, mode, np.random.default_rng(1)).shape == x.shape
    with pytest.raises(ValueError):
        augment_batch(x, "rotate", rng)


def test_dataset_validates_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 1, 1)), np.array([0, 3]), 3)
