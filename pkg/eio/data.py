#!/usr/bin/env python3
"""
Dataset ingestion. Every source yields float images scaled to ``[0, 1]``
and integer labels in ``[0, classes)``; there is no further normalization,
so attack radii are in pixel-fraction units everywhere.
"""

import logging
from pathlib import Path
from typing import Optional
from dataclasses import dataclass

import numpy as np
import torch

from eio.seeding import make_stream


logger = logging.getLogger(__name__)

SOURCES = ("cifar10_binary", "synthetic_blobs", "image_folder")
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_CLASSES = 10
CIFAR_FILE_RECORDS = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


class DatasetError(RuntimeError):
    pass


@dataclass
class DatasetDescriptor:
    source: str = "synthetic_blobs"
    path: Optional[str] = None
    classes: int = 2
    shape: tuple = (3, 32, 32)
    count: int = 2000
    seed: int = 0
    test_fraction: float = 0.2
    train_subset: Optional[int] = None
    image_size: int = 32

    def validate(self, check_paths=True):
        if self.source not in SOURCES:
            raise ValueError(f"Unknown dataset source: {self.source}")
        if self.source != "synthetic_blobs":
            if self.path is None:
                raise ValueError(f"Dataset source {self.source} needs a path")
            if check_paths and not Path(self.path).exists():
                raise FileNotFoundError(f"Dataset path not found: {self.path}")
        if self.classes < 2:
            raise ValueError(f"Need at least two classes: {self.classes}")
        if not 0 < self.test_fraction < 1:
            raise ValueError(f"test_fraction out of range (0, 1): {self.test_fraction}")
        return self


class Dataset:
    """
    In-memory labeled images with deterministic, seed-addressed batch order.

    Parameters
    ----------
    x : torch.Tensor
        Images ``(N, C, H, W)`` in ``[0, 1]``.
    y : torch.Tensor
        Integer labels ``(N,)``.
    classes : int
    name : str
    """
    def __init__(self, x, y, classes, name="dataset"):
        if len(x) != len(y):
            raise DatasetError(f"{name}: {len(x)} images but {len(y)} labels")
        if len(y) and (int(y.min()) < 0 or int(y.max()) >= classes):
            raise DatasetError(f"{name}: labels outside [0, {classes})")
        if len(x) and (float(x.min()) < 0 or float(x.max()) > 1):
            raise DatasetError(f"{name}: images outside [0, 1]")
        self.x = x
        self.y = y.long()
        self.classes = classes
        self.name = name

    def __repr__(self):
        return f"<Dataset {self.name}: {len(self)} x {tuple(self.x.shape[1:])}, {self.classes} classes>"

    def __len__(self):
        return len(self.y)

    @property
    def shape(self):
        return tuple(self.x.shape[1:])

    def to(self, dtype=None, device=None):
        return Dataset(self.x.to(dtype=dtype, device=device),
                self.y.to(device=device), self.classes, self.name)

    def _check_nonempty(self):
        if len(self) == 0:
            raise DatasetError(f"{self.name}: dataset is empty")

    def _order(self, seed, tag, epoch):
        rng = make_stream(seed, f"data/{tag}/{epoch}")
        return torch.as_tensor(rng.permutation(len(self)), dtype=torch.long)

    def batches_per_epoch(self, batch_size, limit=None):
        count = len(self) // batch_size
        return count if limit is None else min(count, limit)

    def iter_batches(self, batch_size, epoch=0, seed=0, tag="train", limit=None):
        """Shuffled full batches; the order depends only on (seed, tag, epoch)."""
        self._check_nonempty()
        order = self._order(seed, tag, epoch)
        for b in range(self.batches_per_epoch(batch_size, limit)):
            ix = order[b*batch_size:(b+1)*batch_size]
            yield self.x[ix], self.y[ix]

    def iter_batch_pairs(self, batch_size, epoch=0, seed=0, limit=None):
        """Two independently shuffled streams zipped into (target, source) pairs."""
        targets = self.iter_batches(batch_size, epoch, seed, tag="target", limit=limit)
        sources = self.iter_batches(batch_size, epoch, seed, tag="source", limit=limit)
        yield from zip(targets, sources)

    def subset(self, count, seed=0):
        if count is None or count >= len(self):
            return self
        ix = self._order(seed, "subset", 0)[:count]
        return Dataset(self.x[ix], self.y[ix], self.classes, f"{self.name}[:{count}]")

    def sample(self, count, seed=0):
        """Fixed evaluation sample ``(x, y)``."""
        self._check_nonempty()
        ds = self.subset(count, seed)
        return ds.x, ds.y


@dataclass
class DatasetSplit:
    train: Dataset
    test: Dataset
    descriptor: DatasetDescriptor

    @property
    def classes(self):
        return self.train.classes


def _split(x, y, classes, fraction, seed, name):
    rng = make_stream(seed, "data/split")
    order = torch.as_tensor(rng.permutation(len(y)), dtype=torch.long)
    n_test = max(1, int(round(fraction * len(y))))
    test_ix, train_ix = order[:n_test], order[n_test:]
    return (
            Dataset(x[train_ix], y[train_ix], classes, f"{name}/train"),
            Dataset(x[test_ix], y[test_ix], classes, f"{name}/test"),
    )


def read_cifar10_file(path, records=None):
    """One CIFAR-10 binary batch; every batch file holds exactly ``records`` records."""
    expected = records or CIFAR_FILE_RECORDS
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"CIFAR-10 file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD != 0:
        raise DatasetError(
                f"Corrupt CIFAR-10 file {path}: {raw.size} bytes is not a "
                f"multiple of the {CIFAR_RECORD}-byte record")
    if raw.size != expected * CIFAR_RECORD:
        raise DatasetError(
                f"Corrupt CIFAR-10 file {path}: {raw.size // CIFAR_RECORD} records, "
                f"expected {expected}")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR_CLASSES:
        raise DatasetError(f"Corrupt CIFAR-10 file {path}: label {labels.max()} out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255
    return torch.from_numpy(images), torch.from_numpy(labels)


def _read_cifar10_files(root, names):
    parts = [read_cifar10_file(root / name) for name in names]
    x = torch.cat([p[0] for p in parts])
    y = torch.cat([p[1] for p in parts])
    return x, y


def cifar10_binary(descriptor):
    root = Path(descriptor.path)
    if not root.is_dir():
        raise DatasetError(f"CIFAR-10 directory not found: {root}")
    x_train, y_train = _read_cifar10_files(root, CIFAR_TRAIN_FILES)
    x_test, y_test = _read_cifar10_files(root, CIFAR_TEST_FILES)
    return DatasetSplit(
            Dataset(x_train, y_train, CIFAR_CLASSES, "cifar10/train"),
            Dataset(x_test, y_test, CIFAR_CLASSES, "cifar10/test"),
            descriptor,
    )


def synthetic_blobs(descriptor):
    """
    Class-conditional blobs around random mean images with small noise; the
    classes are linearly separable in pixel space for practical purposes.
    """
    rng = make_stream(descriptor.seed, "data/blobs")
    shape = tuple(descriptor.shape)
    centers = rng.uniform(0.2, 0.8, size=(descriptor.classes,) + shape)
    labels = rng.integers(descriptor.classes, size=descriptor.count)
    noise = rng.normal(0.0, 0.05, size=(descriptor.count,) + shape)
    images = np.clip(centers[labels] + noise, 0.0, 1.0).astype(np.float32)
    train, test = _split(
            torch.from_numpy(images),
            torch.from_numpy(labels.astype(np.int64)),
            descriptor.classes,
            descriptor.test_fraction,
            descriptor.seed,
            "blobs",
    )
    return DatasetSplit(train, test, descriptor)


def _read_image_folder(root, size):
    from torchvision import datasets, transforms
    transform = transforms.Compose([
            transforms.Resize((size, size)),
            transforms.ToTensor(),
    ])
    folder = datasets.ImageFolder(str(root), transform=transform)
    if len(folder) == 0:
        raise DatasetError(f"No images in {root}")
    xs, ys = zip(*(folder[i] for i in range(len(folder))))
    return torch.stack(xs), torch.as_tensor(ys, dtype=torch.long), len(folder.classes)


def image_folder(descriptor):
    """``root/<class>/*.png``, or ``root/train`` and ``root/test`` of that form."""
    root = Path(descriptor.path)
    if not root.is_dir():
        raise DatasetError(f"Image folder not found: {root}")
    size = descriptor.image_size
    if (root / "train").is_dir() and (root / "test").is_dir():
        x_train, y_train, classes = _read_image_folder(root / "train", size)
        x_test, y_test, _ = _read_image_folder(root / "test", size)
        return DatasetSplit(
                Dataset(x_train, y_train, classes, f"{root.name}/train"),
                Dataset(x_test, y_test, classes, f"{root.name}/test"),
                descriptor,
        )
    x, y, classes = _read_image_folder(root, size)
    train, test = _split(x, y, classes, descriptor.test_fraction,
            descriptor.seed, root.name)
    return DatasetSplit(train, test, descriptor)


def ingest_dataset(descriptor):
    """Load the train/test split a descriptor names."""
    descriptor.validate(check_paths=False)
    if descriptor.source == "cifar10_binary":
        split = cifar10_binary(descriptor)
    elif descriptor.source == "synthetic_blobs":
        split = synthetic_blobs(descriptor)
    else:
        split = image_folder(descriptor)
    if descriptor.train_subset is not None:
        split.train = split.train.subset(descriptor.train_subset, descriptor.seed)
    logger.info(f"Loaded {split.train!r} and {split.test!r}")
    return split
