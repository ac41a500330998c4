import struct

import numpy as np
import pytest

from bitnas.data import (
    CIFAR10_MEAN,
    CIFAR10_STD,
    Dataset,
    load_cifar10,
    load_mnist,
    make_synthetic_cifar10,
    write_synthetic_cifar10,
)
from bitnas.errors import FormatError


def test_synthetic_files_roundtrip(tmp_path):
    write_synthetic_cifar10(tmp_path, 120, 40, seed=9)
    sets = load_cifar10(tmp_path)
    assert sets["train"].num_examples == 120
    assert sets["test"].num_examples == 40
    assert sets["train"].raw.shape == (120, 3, 32, 32)
    assert sets["train"].provenance  # digests recorded


def test_synthetic_generation_deterministic(tmp_path):
    a = make_synthetic_cifar10(50, 10, seed=3)
    b = make_synthetic_cifar10(50, 10, seed=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_cifar_record_layout(tmp_path):
    label = 7
    pixels = np.arange(3072, dtype=np.uint8)
    record = bytes([label]) + pixels.tobytes()
    (tmp_path / "data_batch_1.bin").write_bytes(record)
    (tmp_path / "test_batch.bin").write_bytes(record)
    sets = load_cifar10(tmp_path)
    assert sets["train"].labels.tolist() == [7]
    np.testing.assert_array_equal(
        sets["train"].raw[0], pixels.reshape(3, 32, 32)
    )


def test_truncated_cifar_file_cites_offset(tmp_path):
    good = bytes([1]) + bytes(3072)
    (tmp_path / "data_batch_1.bin").write_bytes(good + good[:100])
    (tmp_path / "test_batch.bin").write_bytes(good)
    with pytest.raises(FormatError, match=str(len(good + good[:100]) - 100)):
        load_cifar10(tmp_path)


def test_missing_cifar_files(tmp_path):
    with pytest.raises(FormatError, match="no data_batch"):
        load_cifar10(tmp_path)
    (tmp_path / "data_batch_1.bin").write_bytes(bytes([0]) + bytes(3072))
    with pytest.raises(FormatError, match="test_batch"):
        load_cifar10(tmp_path)


def test_label_out_of_range_rejected(tmp_path):
    bad = bytes([17]) + bytes(3072)
    (tmp_path / "data_batch_1.bin").write_bytes(bad)
    (tmp_path / "test_batch.bin").write_bytes(bad)
    with pytest.raises(FormatError, match="labels outside"):
        load_cifar10(tmp_path)


def test_normalization_constants_applied():
    raw = np.full((1, 3, 32, 32), 255, np.uint8)
    ds = Dataset(raw, np.zeros(1, np.int64), CIFAR10_MEAN, CIFAR10_STD)
    x, _ = ds.batch([0])
    want = (1.0 - CIFAR10_MEAN) / CIFAR10_STD
    np.testing.assert_allclose(x[0, :, 0, 0], want, rtol=1e-6)


def test_search_split_is_pure_function_of_seed():
    im, lb, _, _ = make_synthetic_cifar10(100, 10, seed=0)
    ds = Dataset(im, lb, CIFAR10_MEAN, CIFAR10_STD)
    a1, b1 = ds.search_split(42)
    a2, b2 = ds.search_split(42)
    np.testing.assert_array_equal(a1.raw, a2.raw)
    np.testing.assert_array_equal(b1.labels, b2.labels)
    assert a1.num_examples == b1.num_examples == 50
    merged = np.concatenate([a1.raw, b1.raw]).reshape(100, -1)
    assert {tuple(r) for r in merged} == {tuple(r) for r in im.reshape(100, -1)}
    a3, _ = ds.search_split(43)
    assert not np.array_equal(a1.raw, a3.raw)


def test_augmentation_deterministic_under_rng():
    im, lb, _, _ = make_synthetic_cifar10(16, 4, seed=1)
    ds = Dataset(im, lb, CIFAR10_MEAN, CIFAR10_STD)
    x1, _ = ds.batch(np.arange(16), np.random.default_rng(7))
    x2, _ = ds.batch(np.arange(16), np.random.default_rng(7))
    np.testing.assert_array_equal(x1, x2)
    x3, _ = ds.batch(np.arange(16))
    assert not np.array_equal(x1, x3)


# ---------------------------------------------------------------------------
# MNIST IDX


def _write_idx_images(path, images):
    n, h, w = images.shape
    path.write_bytes(struct.pack(">IIII", 0x803, n, h, w) + images.tobytes())


def _write_idx_labels(path, labels):
    path.write_bytes(struct.pack(">II", 0x801, len(labels)) + bytes(labels))


def test_mnist_fixture_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    train_images = rng.integers(0, 255, (3, 28, 28), dtype=np.uint8)
    test_images = rng.integers(0, 255, (2, 28, 28), dtype=np.uint8)
    _write_idx_images(tmp_path / "train-images-idx3-ubyte", train_images)
    _write_idx_labels(tmp_path / "train-labels-idx1-ubyte", [1, 2, 3])
    _write_idx_images(tmp_path / "t10k-images-idx3-ubyte", test_images)
    _write_idx_labels(tmp_path / "t10k-labels-idx1-ubyte", [4, 5])
    sets = load_mnist(tmp_path)
    assert sets["train"].num_examples == 3
    assert sets["train"].raw.shape == (3, 1, 32, 32)
    np.testing.assert_array_equal(
        sets["train"].raw[0, 0, 2:30, 2:30], train_images[0]
    )
    assert (sets["train"].raw[:, :, :2, :] == 0).all()
    assert sets["test"].labels.tolist() == [4, 5]


def test_mnist_bad_magic_names_both_values(tmp_path):
    (tmp_path / "train-images-idx3-ubyte").write_bytes(
        struct.pack(">IIII", 0x777, 1, 28, 28) + bytes(784)
    )
    _write_idx_labels(tmp_path / "train-labels-idx1-ubyte", [0])
    _write_idx_images(tmp_path / "t10k-images-idx3-ubyte",
                      np.zeros((1, 28, 28), np.uint8))
    _write_idx_labels(tmp_path / "t10k-labels-idx1-ubyte", [0])
    with pytest.raises(FormatError, match="0x00000777.*0x00000803"):
        load_mnist(tmp_path)


def test_mnist_missing_file(tmp_path):
    with pytest.raises(FormatError, match="missing IDX"):
        load_mnist(tmp_path)


def test_mnist_payload_size_checked(tmp_path):
    (tmp_path / "train-images-idx3-ubyte").write_bytes(
        struct.pack(">IIII", 0x803, 2, 28, 28) + bytes(784)  # one image short
    )
    _write_idx_labels(tmp_path / "train-labels-idx1-ubyte", [0, 1])
    _write_idx_images(tmp_path / "t10k-images-idx3-ubyte",
                      np.zeros((1, 28, 28), np.uint8))
    _write_idx_labels(tmp_path / "t10k-labels-idx1-ubyte", [0])
    with pytest.raises(FormatError, match="payload"):
        load_mnist(tmp_path)
