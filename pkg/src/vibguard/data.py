"""MNIST (IDX) and CIFAR-10 (binary batch) readers.

Pixels are scaled to [0, 1] by dividing by 255; no mean-centering, so
distances and attack budgets are all on the same [0, 1] pixel scale.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Flat image store: ``images`` is (m, d) float32 in [0, 1], row i is x_i.

    ``shape`` is the (channels, height, width) of one image; rows are stored
    channel-planar, so ``images.reshape(-1, *shape)`` is NCHW.
    """

    images: np.ndarray
    labels: np.ndarray
    shape: tuple
    num_classes: int
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        m = len(self.images)
        if m == 0:
            raise ValueError("dataset is empty")
        if self.images.ndim != 2 or self.images.shape[1] != int(np.prod(self.shape)):
            raise ValueError(f"images {self.images.shape} do not match image shape {self.shape}")
        if self.labels.shape != (m,):
            raise ValueError(f"{m} images but labels have shape {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        for arr in (self.images, self.labels):
            arr.flags.writeable = False

    def __len__(self):
        return len(self.images)

    @property
    def dim(self):
        return self.images.shape[1]

    def nchw(self, idx=None):
        x = self.images if idx is None else self.images[idx]
        return x.reshape(-1, *self.shape)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def take(self, idx, name=None):
        idx = np.asarray(idx)
        return Dataset(self.images[idx].copy(), self.labels[idx].copy(), self.shape,
                       self.num_classes, self.split, name or self.name)

    def save(self, path):
        # a file handle stops numpy from appending ".npz" to the name
        with open(path, "wb") as f:
            np.savez(f, images=self.images, labels=self.labels, shape=np.array(self.shape),
                     num_classes=self.num_classes, split=self.split, name=self.name)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            return cls(z["images"].astype(np.float32, copy=False), z["labels"].astype(np.int64),
                       tuple(int(v) for v in z["shape"]), int(z["num_classes"]),
                       str(z["split"]), str(z["name"]))


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(buf, magic, path):
    ndim = magic & 0xFF
    if len(buf) < 4:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise DatasetFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(buf) < 4 + 4 * ndim:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, buf[4:4 + 4 * ndim])
    body = buf[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(body) != need:
        raise DatasetFormatError(f"{path}: truncated or oversized body "
                                 f"({len(body)} bytes, header says {need})")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_mnist(images_path, labels_path, split="train"):
    raw = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if raw.shape[0] != labels.shape[0]:
        raise DatasetFormatError(f"{raw.shape[0]} images but {labels.shape[0]} labels")
    m, h, w = raw.shape
    if labels.max() >= 10:
        raise DatasetFormatError(f"{labels_path}: label {labels.max()} out of range")
    images = raw.reshape(m, h * w).astype(np.float32) / np.float32(255.0)
    return Dataset(images, labels.astype(np.int64), (1, h, w), 10, split, "mnist")


def load_cifar10(batch_paths, split="train"):
    if isinstance(batch_paths, (str, os.PathLike)):
        batch_paths = [batch_paths]
    chunks = []
    for path in batch_paths:
        buf = _read_bytes(path)
        if len(buf) == 0 or len(buf) % CIFAR_RECORD:
            raise DatasetFormatError(f"{path}: size {len(buf)} is not a multiple of "
                                     f"{CIFAR_RECORD}-byte records")
        chunks.append(np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    rec = np.concatenate(chunks)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise DatasetFormatError(f"label {labels.max()} >= 10")
    images = rec[:, 1:].astype(np.float32) / np.float32(255.0)
    return Dataset(images, labels, CIFAR_SHAPE, 10, split, "cifar10")


def _find(directory, name):
    for cand in (name, name + ".gz"):
        p = os.path.join(directory, cand)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(os.path.join(directory, name))


def load_mnist_dir(directory, split="train"):
    img, lab = MNIST_FILES[split]
    return load_mnist(_find(directory, img), _find(directory, lab), split)


def load_cifar10_dir(directory, split="train"):
    sub = os.path.join(directory, "cifar-10-batches-bin")
    if os.path.isdir(sub):
        directory = sub
    return load_cifar10([_find(directory, f) for f in CIFAR_FILES[split]], split)


def subsample_indices(dataset, per_class, seed):
    """Row indices picked by :func:`subsample`."""
    if per_class <= 0:
        raise ValueError(f"per_class must be positive, got {per_class}")
    counts = dataset.class_counts()
    if per_class > counts.min():
        raise ValueError(f"per_class={per_class} exceeds smallest class count {counts.min()}")
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        picks.append(rng.choice(members, size=per_class, replace=False))
    return rng.permutation(np.concatenate(picks))


def subsample(dataset, per_class, seed):
    """Exactly ``per_class`` examples of every class, shuffled by ``seed``."""
    return dataset.take(subsample_indices(dataset, per_class, seed))
