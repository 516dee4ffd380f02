#!/usr/bin/env python3

import numpy as np
import pytest
import torch

from . import TOY_SHAPE, toy_dataset
from eio import data
from eio.data import (CIFAR_FILE_RECORDS, CIFAR_RECORD, Dataset, DatasetDescriptor,
        DatasetError, cifar10_binary, image_folder, ingest_dataset, read_cifar10_file)


def write_cifar(path, labels, seed=0):
    rng = np.random.default_rng(seed)
    records = rng.integers(0, 256, size=(len(labels), CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = labels
    records.tofile(path)
    return records


@pytest.fixture
def f_train():
    return toy_dataset(count=40)[0]


class TestDataset:
    def test_blobs(self):
        train, test = toy_dataset(count=50)
        assert len(train) + len(test) == 50
        assert len(test) == 10
        assert train.shape == TOY_SHAPE
        assert train.x.dtype == torch.float64
        assert 0 <= float(train.x.min()) and float(train.x.max()) <= 1
        again, _ = toy_dataset(count=50)
        assert torch.equal(train.x, again.x)

    def test_batches(self, f_train):
        batches = list(f_train.iter_batches(8, epoch=0, seed=1))
        assert len(batches) == len(f_train) // 8
        assert all(x.shape[0] == 8 for x, _ in batches)
        same = list(f_train.iter_batches(8, epoch=0, seed=1))
        assert all(torch.equal(a[1], b[1]) for a, b in zip(batches, same))
        other = list(f_train.iter_batches(8, epoch=1, seed=1))
        assert not all(torch.equal(a[0], b[0]) for a, b in zip(batches, other))
        assert len(list(f_train.iter_batches(8, limit=2))) == 2

    def test_pairs(self, f_train):
        pairs = list(f_train.iter_batch_pairs(8, epoch=0, seed=0))
        assert len(pairs) == f_train.batches_per_epoch(8)
        (x_t, _), (x_s, _) = pairs[0]
        assert x_t.shape == x_s.shape
        assert not torch.equal(x_t, x_s)

    def test_subset(self, f_train):
        sub = f_train.subset(10, seed=2)
        assert len(sub) == 10
        assert f_train.subset(None) is f_train
        x, y = f_train.sample(5)
        assert len(x) == len(y) == 5

    @pytest.mark.parametrize("x,y", [
        (torch.zeros(3, 1), torch.zeros(2, dtype=torch.long)),
        (torch.zeros(2, 1), torch.tensor([0, 5])),
        (torch.full((2, 1), 2.0), torch.zeros(2, dtype=torch.long)),
    ])
    def test_invalid(self, x, y):
        with pytest.raises(DatasetError):
            Dataset(x, y, classes=3)

    def test_empty(self):
        empty = Dataset(torch.zeros(0, 1), torch.zeros(0, dtype=torch.long), classes=2)
        with pytest.raises(DatasetError):
            list(empty.iter_batches(4))


class TestCifar:
    def test_read(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        records = write_cifar(path, [3, 9])
        x, y = read_cifar10_file(path, records=2)
        assert x.shape == (2, 3, 32, 32)
        assert y.tolist() == [3, 9]
        assert x[0, 0, 0, 0].item() == pytest.approx(records[0, 1] / 255)
        assert float(x.max()) <= 1

    def test_corrupt(self, tmp_path):
        path = tmp_path / "short.bin"
        path.write_bytes(b"\x00" * (CIFAR_RECORD + 5))
        with pytest.raises(DatasetError, match="Corrupt"):
            read_cifar10_file(path, records=1)
        write_cifar(path, [12])
        with pytest.raises(DatasetError, match="label"):
            read_cifar10_file(path, records=1)
        with pytest.raises(DatasetError):
            read_cifar10_file(tmp_path / "missing.bin")

    def test_truncated_at_record_boundary(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        write_cifar(path, [1, 2, 3])
        with pytest.raises(DatasetError, match="3 records, expected 4"):
            read_cifar10_file(path, records=4)
        with pytest.raises(DatasetError, match=f"expected {CIFAR_FILE_RECORDS}"):
            read_cifar10_file(path)
        path.write_bytes(b"")
        with pytest.raises(DatasetError):
            read_cifar10_file(path, records=1)

    def test_directory(self, tmp_path, monkeypatch):
        monkeypatch.setattr(data, "CIFAR_FILE_RECORDS", 2)
        for i in range(1, 6):
            write_cifar(tmp_path / f"data_batch_{i}.bin", [i, 0], seed=i)
        write_cifar(tmp_path / "test_batch.bin", [7, 1])
        descriptor = DatasetDescriptor(source="cifar10_binary", path=str(tmp_path),
                train_subset=4)
        split = ingest_dataset(descriptor)
        assert len(split.train) == 4
        assert len(split.test) == 2
        assert split.classes == 10
        assert len(cifar10_binary(descriptor).train) == 10

    def test_directory_short_batch(self, tmp_path):
        for i in range(1, 6):
            write_cifar(tmp_path / f"data_batch_{i}.bin", [i, 0], seed=i)
        write_cifar(tmp_path / "test_batch.bin", [7, 1])
        descriptor = DatasetDescriptor(source="cifar10_binary", path=str(tmp_path))
        with pytest.raises(DatasetError, match="expected"):
            ingest_dataset(descriptor)


def test_image_folder(tmp_path):
    from PIL import Image
    rng = np.random.default_rng(0)
    for label in ("cat", "dog"):
        (tmp_path / label).mkdir()
        for i in range(5):
            pixels = rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)
            Image.fromarray(pixels).save(tmp_path / label / f"{i}.png")
    descriptor = DatasetDescriptor(source="image_folder", path=str(tmp_path),
            image_size=8, test_fraction=0.2)
    split = image_folder(descriptor)
    assert split.classes == 2
    assert len(split.train) == 8
    assert len(split.test) == 2
    assert split.train.shape == (3, 8, 8)


@pytest.mark.parametrize("changes", [
    {"source": "mnist"},
    {"source": "cifar10_binary"},
    {"classes": 1},
    {"test_fraction": 1.0},
])
def test_descriptor_validate(changes):
    with pytest.raises(ValueError):
        DatasetDescriptor(**changes).validate()
