import gzip
import struct

import numpy as np
import pytest
import torch
from PIL import Image

from qgvae.data import DataError, from_array, load_dataset, read_idx_images

from conftest import needs_mnist


def write_idx(path, images, compress=False):
    n, r, c = images.shape
    data = struct.pack(">IIII", 2051, n, r, c) + images.astype(np.uint8).tobytes()
    if compress:
        with gzip.open(str(path) + ".gz", "wb") as fh:
            fh.write(data)
    else:
        path.write_bytes(data)


def test_idx_reader_and_padding(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (5, 28, 28)).astype(np.uint8)
    (tmp_path / "mnist").mkdir()
    write_idx(tmp_path / "mnist" / "train-images-idx3-ubyte", imgs)
    write_idx(tmp_path / "mnist" / "t10k-images-idx3-ubyte", imgs[:2], compress=True)
    ds = load_dataset("mnist", "train", tmp_path)
    assert len(ds) == 5 and tuple(ds.images.shape) == (5, 1, 32, 32)
    assert torch.equal(ds.images[:, 0, 2:30, 2:30], torch.from_numpy(imgs))
    assert ds.images[:, :, :2].sum() == 0 and ds.images[:, :, :, 30:].sum() == 0
    x = ds.get(slice(0, 5))
    assert x.min() >= -1 and x.max() <= 1 and float(x[0, 0, 0, 0]) == -1.0
    assert len(load_dataset("mnist", "test", tmp_path)) == 2


def test_idx_corruption(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(struct.pack(">IIII", 2051, 3, 28, 28) + bytes(10))
    with pytest.raises(DataError, match="file size"):
        read_idx_images(p)
    p.write_bytes(struct.pack(">IIII", 2049, 1, 1, 1) + bytes(1))
    with pytest.raises(DataError, match="magic"):
        read_idx_images(p)
    with pytest.raises(DataError):
        load_dataset("mnist", "train", tmp_path)
    with pytest.raises(DataError):
        load_dataset("mnist", "validation", tmp_path)


def test_cifar_layout(tmp_path):
    d = tmp_path / "cifar-10-batches-bin"
    d.mkdir()
    rng = np.random.default_rng(1)
    records = {}
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        rec = rng.integers(0, 256, (4, 3073)).astype(np.uint8)
        rec.tofile(d / name)
        records[name] = rec
    train = load_dataset("cifar10", "train", tmp_path)
    assert tuple(train.images.shape) == (20, 3, 32, 32)
    first = records["data_batch_1.bin"][0, 1:].reshape(3, 32, 32)
    assert np.array_equal(train.images[0].numpy(), first)
    assert len(load_dataset("cifar-10", "test", tmp_path)) == 4
    (d / "data_batch_3.bin").write_bytes(bytes(100))
    with pytest.raises(DataError):
        load_dataset("cifar10", "train", tmp_path)


@needs_mnist
def test_real_mnist_split_sizes():
    train = load_dataset("mnist", "train")
    assert tuple(train.images.shape) == (60000, 1, 32, 32)
    assert len(load_dataset("mnist", "test")) == 10000


def test_image_directory(tmp_path):
    for i in range(3):
        Image.fromarray(np.full((8, 6), 40 * i, dtype=np.uint8)).save(tmp_path / f"{i}.png")
    ds = load_dataset(str(tmp_path))
    assert tuple(ds.images.shape) == (3, 1, 8, 6)
    (tmp_path / "train").mkdir()
    Image.fromarray(np.zeros((8, 6, 3), dtype=np.uint8)).save(tmp_path / "train" / "a.png")
    assert tuple(load_dataset(str(tmp_path), "train").images.shape) == (1, 3, 8, 6)
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(tmp_path / "odd.png")
    with pytest.raises(DataError, match="differing"):
        load_dataset(str(tmp_path), "test")


def test_empty_directory_is_an_error(tmp_path):
    with pytest.raises(DataError, match="no image files"):
        load_dataset(str(tmp_path))
    with pytest.raises(DataError, match="unknown dataset"):
        load_dataset(str(tmp_path / "missing"))


def test_batches_are_deterministic_and_resumable():
    ds = from_array(np.arange(10 * 4, dtype=np.uint8).reshape(10, 1, 2, 2))
    a = [b.clone() for b in ds.batches(3, seed=4, epoch=1)]
    b = [b.clone() for b in ds.batches(3, seed=4, epoch=1)]
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    assert len(a) == ds.num_batches(3) == 4 and a[-1].shape[0] == 1
    c = list(ds.batches(3, seed=4, epoch=2))
    assert not all(torch.equal(x, y) for x, y in zip(a, c))
    resumed = list(ds.batches(3, seed=4, epoch=1, start=2))
    assert all(torch.equal(x, y) for x, y in zip(a[2:], resumed))
    assert sorted(torch.cat(a).flatten().tolist()) == sorted(ds.get(slice(0, 10)).flatten().tolist())


def test_from_array_validation():
    with pytest.raises(DataError):
        from_array(np.zeros((2, 1, 4, 4), dtype=np.float32))
    with pytest.raises(DataError):
        from_array(np.zeros((0, 1, 4, 4), dtype=np.uint8))
