import struct

import numpy as np
import pytest

from arrestlab import data
from arrestlab.data import BatchPlan, DataError


def cifar_bytes(labels, rng):
    recs = []
    for lab in labels:
        recs.append(bytes([lab]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes())
    return b"".join(recs)


def test_cifar_two_records_exact(rng):
    raw = bytearray(cifar_bytes([3, 9], rng))
    raw[1] = 255  # first red pixel of record 0
    raw[3073 + 1 + 1024] = 0  # first green pixel of record 1
    ds = data.decode_cifar10(bytes(raw))
    assert ds.images.shape == (2, 3, 32, 32)
    assert ds.images[0, 0, 0, 0] == 1.0 and ds.images[1, 1, 0, 0] == 0.0
    assert list(ds.labels) == [3, 9]
    plane = np.frombuffer(bytes(raw[1:3073]), dtype=np.uint8).reshape(3, 32, 32) / 255.0
    assert np.array_equal(ds.images[0], plane)


def test_cifar_round_trip_is_byte_exact(rng):
    raw = cifar_bytes([0, 1, 2, 7], rng)
    assert data.encode_cifar10(data.decode_cifar10(raw)) == raw


def test_cifar_truncated(rng):
    raw = cifar_bytes([1, 2], rng)[:-5]
    with pytest.raises(DataError, match="offset 3073"):
        data.decode_cifar10(raw)


def test_cifar_bad_label(rng):
    raw = bytearray(cifar_bytes([1, 2], rng))
    raw[3073] = 10
    with pytest.raises(DataError, match="offset 3073"):
        data.decode_cifar10(bytes(raw))


def test_cifar_batch_size_arithmetic():
    assert 30_730_000 // data.CIFAR_RECORD == 10_000 and 30_730_000 % data.CIFAR_RECORD == 0


def test_cifar_directory_loading(tmp_path, rng):
    (tmp_path / "data_batch_1.bin").write_bytes(cifar_bytes([1, 2], rng))
    (tmp_path / "data_batch_2.bin").write_bytes(cifar_bytes([3], rng))
    (tmp_path / "test_batch.bin").write_bytes(cifar_bytes([4], rng))
    assert len(data.load_cifar10_binary(tmp_path)) == 3
    assert list(data.load_cifar10_binary(tmp_path, "test").labels) == [4]
    with pytest.raises(DataError):
        data.load_cifar10_binary(tmp_path / "missing")


def idx_pair(pixels, labels):
    n, h, w = pixels.shape
    images = struct.pack(">IIII", 0x803, n, h, w) + pixels.astype(np.uint8).tobytes()
    labs = struct.pack(">II", 0x801, len(labels)) + bytes(labels)
    return images, labs


def test_idx_single_image_exact():
    pixels = np.arange(28 * 28, dtype=np.uint32).reshape(1, 28, 28) % 256
    images, labels = idx_pair(pixels, [7])
    ds = data.decode_idx(images, labels)
    assert ds.images.shape == (1, 1, 28, 28)
    assert np.array_equal(ds.images[0, 0], pixels[0] / 255.0)
    assert ds.labels[0] == 7


def test_idx_big_endian_count():
    assert struct.unpack(">I", bytes.fromhex("0000EA60"))[0] == 60000
    header = bytes.fromhex("00000803") + bytes.fromhex("0000EA60") + struct.pack(">II", 28, 28)
    with pytest.raises(DataError, match="60000 images but 1 labels"):
        data.decode_idx(header, struct.pack(">II", 0x801, 1) + b"\x00")


def test_idx_errors():
    images, labels = idx_pair(np.zeros((2, 2, 2)), [1, 2])
    with pytest.raises(DataError, match="magic"):
        data.decode_idx(b"\x00\x00\x08\x01" + images[4:], labels)
    with pytest.raises(DataError, match="label magic"):
        data.decode_idx(images, images[:8] + labels[8:])
    with pytest.raises(DataError, match="2 images but 3 labels"):
        data.decode_idx(images, struct.pack(">II", 0x801, 3) + bytes([1, 2, 3]))
    with pytest.raises(DataError, match="payload"):
        data.decode_idx(images[:-1], labels)


def test_idx_round_trip(tmp_path, rng):
    pixels = rng.integers(0, 256, (3, 5, 4))
    images, labels = idx_pair(pixels, [0, 5, 9])
    ds = data.decode_idx(images, labels)
    assert data.encode_idx(ds) == (images, labels)
    data.write_idx(ds, tmp_path / "i", tmp_path / "l")
    again = data.load_mnist_idx(tmp_path / "i", tmp_path / "l")
    assert np.array_equal(again.images, ds.images) and again.checksum == ds.checksum


def test_dataset_validation():
    with pytest.raises(DataError, match="outside"):
        data.Dataset(np.full((1, 1, 2, 2), 1.5), [0])
    with pytest.raises(DataError, match="labels"):
        data.Dataset(np.zeros((1, 1, 2, 2)), [10])
    with pytest.raises(DataError, match="empty"):
        data.Dataset(np.zeros((0, 1, 2, 2)), np.zeros(0, int))


def test_digits_substitute(digits):
    assert digits.images.shape == (1797, 1, 8, 8)
    assert np.all(np.isin(np.rint(digits.images * 255), np.arange(256)))
    assert digits.checksum


def test_subset_properties(digits):
    one = data.subset(digits, 1, seed=0)
    assert len(one) == 10 and sorted(one.labels) == list(range(10))
    a = data.subset(digits, 20, seed=4)
    b = data.subset(digits, 20, seed=4)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    with pytest.raises(DataError, match="fewer than"):
        data.subset(digits, 1000)


def test_subset_full_count_is_permutation():
    ds = data.make_separable(5, seed=0)
    full = data.subset(ds, 5, seed=1)
    assert sorted(map(bytes, full.images)) == sorted(map(bytes, ds.images))


def test_split_is_disjoint(digits, digits_split):
    train, held = digits_split
    assert len(train) + len(held) == len(digits)
    keys = {bytes(x) + bytes([y]) for x, y in zip(train.images, train.labels)}
    overlap = sum(bytes(x) + bytes([y]) in keys for x, y in zip(held.images, held.labels))
    # digits contains a few exact duplicate images; allow at most those
    assert overlap <= 5


@pytest.mark.parametrize("n, bs", [(10, 3), (64, 64), (7, 10), (100, 7)])
def test_batches_partition_indices(n, bs):
    order = data.batch_order(n, BatchPlan(bs, seed=2), epoch=1)
    flat = np.concatenate(order)
    assert sorted(flat) == list(range(n))


def test_batch_order_keyed_by_epoch():
    plan = BatchPlan(4, seed=0)
    e1 = np.concatenate(data.batch_order(50, plan, 1))
    e2 = np.concatenate(data.batch_order(50, plan, 2))
    assert not np.array_equal(e1, e2)
    assert np.array_equal(e1, np.concatenate(data.batch_order(50, plan, 1)))


def test_drop_last():
    order = data.batch_order(10, BatchPlan(3, drop_last=True), 1)
    assert [len(b) for b in order] == [3, 3, 3]
    with pytest.raises(DataError):
        data.batch_order(2, BatchPlan(3, drop_last=True), 1)


def test_resolve_root(monkeypatch, tmp_path):
    monkeypatch.delenv(data.DATA_ROOT_ENV, raising=False)
    assert data.resolve_root("abc") == data.Path("abc")
    monkeypatch.setenv(data.DATA_ROOT_ENV, str(tmp_path))
    assert data.resolve_root("abc") == tmp_path
