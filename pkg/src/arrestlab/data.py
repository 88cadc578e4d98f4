"""Dataset loading (CIFAR-10 binary, MNIST IDX), subsetting and batching."""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

CIFAR_RECORD = 3073
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATA_ROOT_ENV = "ARRESTLAB_DATA_ROOT"


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) in [0, 1]
    labels: np.ndarray  # (n,) int64
    name: str = "dataset"
    checksum: str = ""
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"{self.name}: images must be (n, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) == 0:
            raise DataError(f"{self.name}: empty dataset")
        if self.images.min() < 0 or self.images.max() > 1:
            raise DataError(f"{self.name}: pixels outside [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"{self.name}: labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], name or self.name, self.checksum,
                       self.num_classes)


def _sha256(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


# -- CIFAR-10 binary ---------------------------------------------------------

def decode_cifar10(raw: bytes, name: str = "cifar10") -> Dataset:
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DataError(f"{name}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD} "
                        f"(trailing record starts at offset {len(raw) - len(raw) % CIFAR_RECORD})")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataError(f"{name}: label byte {labels[bad[0]]} > 9 at offset {bad[0] * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, name, _sha256(raw), 10)


def encode_cifar10(dataset: Dataset) -> bytes:
    """Inverse of ``decode_cifar10`` for datasets with 8-bit pixel levels."""
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8).reshape(len(dataset), -1)
    if pixels.shape[1] != CIFAR_RECORD - 1:
        raise DataError("CIFAR records hold 3x32x32 images")
    out = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    return out.tobytes()


def load_cifar10_binary(path, split: str = "train") -> Dataset:
    """Load one batch file, or every ``data_batch_*.bin`` (or ``test_batch.bin``)
    in a directory."""
    path = Path(path)
    if path.is_dir():
        pattern = "data_batch_*.bin" if split == "train" else "test_batch.bin"
        files = sorted(path.glob(pattern))
        if not files:
            raise DataError(f"no CIFAR-10 batches matching {pattern} in {path}")
    elif path.is_file():
        files = [path]
    else:
        raise DataError(f"CIFAR-10 path {path} does not exist")
    parts = [decode_cifar10(f.read_bytes(), f.name) for f in files]
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   f"cifar10-{split}", _sha256(*(p.checksum.encode() for p in parts)), 10)


# -- MNIST IDX -----------------------------------------------------------------

def decode_idx(images_raw: bytes, labels_raw: bytes, name: str = "mnist") -> Dataset:
    if len(images_raw) < 16 or len(labels_raw) < 8:
        raise DataError(f"{name}: IDX header truncated")
    magic, n, rows, cols = struct.unpack(">IIII", images_raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"{name}: image magic 0x{magic:08X} != 0x{IDX_IMAGES_MAGIC:08X}")
    lmagic, ln = struct.unpack(">II", labels_raw[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DataError(f"{name}: label magic 0x{lmagic:08X} != 0x{IDX_LABELS_MAGIC:08X}")
    if ln != n:
        raise DataError(f"{name}: {n} images but {ln} labels")
    if len(images_raw) != 16 + n * rows * cols:
        raise DataError(f"{name}: image payload is {len(images_raw) - 16} bytes, "
                        f"expected {n * rows * cols}")
    if len(labels_raw) != 8 + n:
        raise DataError(f"{name}: label payload is {len(labels_raw) - 8} bytes, expected {n}")
    images = np.frombuffer(images_raw, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(labels_raw, dtype=np.uint8, offset=8).astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataError(f"{name}: label {labels[bad[0]]} out of range at offset {8 + bad[0]}")
    return Dataset(images.astype(np.float64) / 255.0, labels, name,
                   _sha256(images_raw, labels_raw), 10)


def encode_idx(dataset: Dataset) -> tuple[bytes, bytes]:
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise DataError("IDX images are single-channel")
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    images = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes()
    labels = struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    return images, labels


def load_mnist_idx(images_path, labels_path) -> Dataset:
    images_path, labels_path = Path(images_path), Path(labels_path)
    for p in (images_path, labels_path):
        if not p.is_file():
            raise DataError(f"IDX file {p} does not exist")
    return decode_idx(images_path.read_bytes(), labels_path.read_bytes(), images_path.stem)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    images, labels = encode_idx(dataset)
    Path(images_path).write_bytes(images)
    Path(labels_path).write_bytes(labels)


# -- built-in small datasets -----------------------------------------------------

def load_digits() -> Dataset:
    """The 1797 8x8 handwritten digits bundled with scikit-learn, quantised to
    8-bit pixels exactly as an IDX round trip would store them."""
    from sklearn.datasets import load_digits as _sk_digits

    bunch = _sk_digits()
    pixels = np.rint(bunch.images * (255.0 / 16.0)).astype(np.uint8)
    ds = Dataset(pixels[:, None].astype(np.float64) / 255.0, bunch.target, "digits", "", 10)
    images_raw, labels_raw = encode_idx(ds)
    ds.checksum = _sha256(images_raw, labels_raw)
    return ds


def make_separable(n_per_class: int = 20, seed: int = 0, size: int = 4) -> Dataset:
    """Two-class toy images: class 1 is brighter in the left half."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.2, 0.4, size=(2 * n_per_class, 1, size, size))
    labels = np.repeat([0, 1], n_per_class)
    base[labels == 1, :, :, : size // 2] += 0.5
    base[labels == 0, :, :, size // 2:] += 0.5
    return Dataset(np.clip(base, 0, 1), labels, "separable", "", 2)


def resolve_root(root) -> Path | None:
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    return Path(root) if root else None


# -- subsetting and batching -------------------------------------------------------

def subset(dataset: Dataset, per_class: int, seed: int = 0) -> Dataset:
    if per_class < 1:
        raise DataError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    chosen = []
    for k in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == k)
        if len(idx) < per_class:
            raise DataError(f"class {k} has {len(idx)} examples, fewer than {per_class}")
        chosen.append(rng.permutation(idx)[:per_class])
    order = rng.permutation(np.concatenate(chosen))
    return dataset.take(order, f"{dataset.name}-sub{per_class}")


def split(dataset: Dataset, per_class: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Class-balanced training subset and the remainder as a held-out set."""
    train = subset(dataset, per_class, seed)
    rng = np.random.default_rng(seed)
    chosen = []
    for k in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == k)
        chosen.append(rng.permutation(idx)[:per_class])
    rest = np.setdiff1d(np.arange(len(dataset)), np.concatenate(chosen))
    return train, dataset.take(rest, f"{dataset.name}-heldout")


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 64
    seed: int = 0
    drop_last: bool = False


def batch_order(n: int, plan: BatchPlan, epoch: int) -> list[np.ndarray]:
    if plan.batch_size < 1:
        raise DataError("batch_size must be >= 1")
    if plan.drop_last and plan.batch_size > n:
        raise DataError(f"batch_size {plan.batch_size} exceeds dataset size {n} with drop_last")
    perm = np.random.default_rng([plan.seed, epoch]).permutation(n)
    stop = n - n % plan.batch_size if plan.drop_last else n
    return [perm[i:i + plan.batch_size] for i in range(0, stop, plan.batch_size)]


def batches(dataset: Dataset, plan: BatchPlan, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    for idx in batch_order(len(dataset), plan, epoch):
        yield dataset.images[idx], dataset.labels[idx]
