import numpy as np
import pytest
import torch

from qgvae.config import ModelConfig, RunConfig, TrainConfig
from qgvae.data import data_root, from_array


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(num_tokens=4, downscale_factor=2, num_heads=2, codebook_size=8, quant_dim=4,
                unet_blocks=1, unet_channels=8, reset_window=5, input_channels=1,
                image_size=(16, 16))
    base.update(kw)
    return ModelConfig(**base)


def tiny_run_config(model=None, **train) -> RunConfig:
    t = dict(batch_size=4, epochs=2, log_every=1, eval_batch_size=8)
    t.update(train)
    return RunConfig(model=model or tiny_model_config(), train=TrainConfig(**t))


def blob_images(n: int, size: int = 16, channels: int = 1, seed: int = 0) -> np.ndarray:
    """Smooth random blobs as uint8 ``[n, channels, size, size]``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    out = np.zeros((n, channels, size, size))
    for i in range(n):
        for c in range(channels):
            cx, cy = rng.uniform(0, size, 2)
            r = rng.uniform(size / 6, size / 3)
            out[i, c] = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
    return (out * 255).round().astype(np.uint8)


@pytest.fixture
def tiny_dataset():
    return from_array(blob_images(16))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def mnist_available() -> bool:
    root = data_root() / "mnist"
    return any((root / f).exists() or (root / (f + ".gz")).exists()
               for f in ("train-images-idx3-ubyte", "t10k-images-idx3-ubyte"))


needs_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST files not found")


# one-line pass/fail records, printed in the terminal summary
REPORT: list[tuple[str, bool, str]] = []


@pytest.fixture
def report():
    def record(label: str, ok: bool, detail: str) -> bool:
        REPORT.append((label, bool(ok), detail))
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in REPORT:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
