"""Dataset loading: MNIST / CIFAR-10 in their published binary layouts, or image folders.

Datasets are held in memory as uint8 ``[N, channels, W, H]`` and normalised
per batch. The dataset root defaults to ``$QGVAE_DATA_DIR``.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch


class DataError(RuntimeError):
    """Missing, corrupt or unsupported dataset files."""


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


@dataclass
class ImageDataset:
    images: torch.Tensor                 # uint8 [N, channels, W, H]
    value_range: tuple[float, float] = (-1.0, 1.0)
    name: str = ""

    def __len__(self) -> int:
        return self.images.shape[0]

    def normalise(self, raw: torch.Tensor) -> torch.Tensor:
        lo, hi = self.value_range
        return raw.float() / 255.0 * (hi - lo) + lo

    def get(self, idx) -> torch.Tensor:
        return self.normalise(self.images[idx])

    def batches(self, batch_size: int, seed: int | None = None, epoch: int = 0,
                start: int = 0, drop_last: bool = False) -> Iterator[torch.Tensor]:
        """Yield normalised batches, shuffled by ``(seed, epoch)`` when a seed is given.

        ``start`` skips that many batches of the epoch (used when resuming).
        """
        n = len(self)
        if seed is None:
            order = torch.arange(n)
        else:
            g = torch.Generator().manual_seed(seed * 100003 + epoch)
            order = torch.randperm(n, generator=g)
        stop = n - n % batch_size if drop_last else n
        for i in range(start * batch_size, stop, batch_size):
            yield self.get(order[i:i + batch_size])

    def num_batches(self, batch_size: int, drop_last: bool = False) -> int:
        return len(self) // batch_size if drop_last else -(-len(self) // batch_size)


def data_root(root: str | Path | None = None) -> Path:
    if root is not None:
        return Path(root)
    env = os.environ.get("QGVAE_DATA_DIR")
    if env:
        return Path(env)
    return Path.home() / "data"


def _open(path: Path):
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise DataError(f"missing dataset file {path} (or {gz.name})")


def read_idx_images(path: Path) -> np.ndarray:
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 16:
        raise DataError(f"{path}: truncated idx header")
    magic, n, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != 2051:
        raise DataError(f"{path}: bad idx image magic {magic}")
    if len(data) != 16 + n * rows * cols:
        raise DataError(f"{path}: expected {n}x{rows}x{cols} pixels, file size disagrees")
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def load_mnist(root: Path, split: str) -> np.ndarray:
    prefix = {"train": "train", "test": "t10k"}.get(split)
    if prefix is None:
        raise DataError(f"unknown split {split!r}")
    for sub in (root / "mnist", root / "MNIST" / "raw", root):
        if (sub / f"{prefix}-images-idx3-ubyte").exists() or \
                (sub / f"{prefix}-images-idx3-ubyte.gz").exists():
            images = read_idx_images(sub / f"{prefix}-images-idx3-ubyte")
            break
    else:
        raise DataError(f"MNIST {split} images not found under {root}")
    # 28x28 -> 32x32 by zero padding (2 pixels per side)
    return np.pad(images, ((0, 0), (2, 2), (2, 2)))[:, None]


def load_cifar10(root: Path, split: str) -> np.ndarray:
    for sub in (root / "cifar10" / "cifar-10-batches-bin", root / "cifar-10-batches-bin",
                root / "cifar10", root):
        if (sub / "test_batch.bin").exists():
            break
    else:
        raise DataError(f"CIFAR-10 binary batches not found under {root}")
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    out = []
    for name in names:
        if not (sub / name).exists():
            raise DataError(f"missing CIFAR-10 batch {sub / name}")
        raw = np.fromfile(sub / name, dtype=np.uint8)
        if raw.size % 3073:
            raise DataError(f"{sub / name}: size is not a multiple of 3073 bytes")
        out.append(raw.reshape(-1, 3073)[:, 1:].reshape(-1, 3, 32, 32))
    return np.concatenate(out)


def load_image_dir(path: Path, channels: int | None = None) -> np.ndarray:
    from PIL import Image

    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no image files in {path}")
    arrays = []
    for f in files:
        try:
            with Image.open(f) as im:
                mode = {1: "L", 3: "RGB"}.get(channels or (1 if im.mode in ("L", "1") else 3))
                arr = np.asarray(im.convert(mode))
        except OSError as e:
            raise DataError(f"cannot read image {f}: {e}") from e
        arrays.append(arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1))
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DataError(f"images in {path} have differing shapes {sorted(shapes)}")
    return np.stack(arrays)


def load_dataset(name: str, split: str = "train", root: str | Path | None = None,
                 value_range=(-1.0, 1.0), limit: int | None = None,
                 channels: int | None = None) -> ImageDataset:
    """Load ``mnist``, ``cifar10`` or a directory of equally sized images.

    A directory with a ``split`` subdirectory serves that split from it.
    """
    key = name.lower().replace("-", "")
    if key == "mnist":
        arr = load_mnist(data_root(root), split)
    elif key == "cifar10":
        arr = load_cifar10(data_root(root), split)
    else:
        path = Path(name)
        if not path.is_dir():
            raise DataError(f"unknown dataset {name!r} (not mnist, cifar10, or a directory)")
        if (path / split).is_dir():
            path = path / split
        arr = load_image_dir(path, channels)
    if limit is not None:
        arr = arr[:limit]
    if len(arr) == 0:
        raise DataError(f"dataset {name!r} is empty")
    return ImageDataset(torch.from_numpy(np.ascontiguousarray(arr)), tuple(value_range), key)


def from_array(images: np.ndarray, value_range=(-1.0, 1.0), name: str = "array") -> ImageDataset:
    """Wrap uint8 ``[N, channels, W, H]`` pixels."""
    arr = np.asarray(images)
    if arr.dtype != np.uint8 or arr.ndim != 4:
        raise DataError("expected uint8 [N, channels, W, H]")
    if len(arr) == 0:
        raise DataError("dataset is empty")
    return ImageDataset(torch.from_numpy(np.ascontiguousarray(arr)), tuple(value_range), name)
