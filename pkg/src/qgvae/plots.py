"""Static figures and CSV tables written next to each other.

Every report function takes an output stem and writes ``<stem>.csv`` with
the plotted numbers plus ``<stem>.png`` with the rendered figure.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({"font.size": 9, "axes.titlesize": 9, "figure.dpi": 120,
                     "savefig.bbox": "tight"})


def write_csv(path: str | Path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _to_display(img: np.ndarray, value_range=(-1.0, 1.0)) -> np.ndarray:
    """``[channels, W, H]`` -> ``[W, H]`` or ``[W, H, 3]`` in [0, 1]."""
    lo, hi = value_range
    img = np.clip((np.asarray(img, dtype=np.float64) - lo) / (hi - lo), 0, 1)
    return img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)


def save_image(path: str | Path, img: np.ndarray, value_range=(-1.0, 1.0)) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    disp = _to_display(img, value_range)
    plt.imsave(path, disp, cmap="gray" if disp.ndim == 2 else None, vmin=0, vmax=1)
    return path


def image_row(stem: str | Path, images: list[np.ndarray], titles: list[str],
              value_range=(-1.0, 1.0)) -> Path:
    fig, axes = plt.subplots(1, len(images), figsize=(1.6 * len(images), 1.9), squeeze=False)
    for ax, img, title in zip(axes[0], images, titles):
        disp = _to_display(img, value_range)
        ax.imshow(disp, cmap="gray" if disp.ndim == 2 else None, vmin=0, vmax=1)
        ax.set_title(title)
        ax.axis("off")
    out = Path(stem).with_suffix(".png")
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    plt.close(fig)
    return out


def feature_map_grid(stem: str | Path, maps: np.ndarray, count: int = 16) -> Path:
    """First ``count`` per-channel normalised feature maps in a square grid."""
    maps = np.asarray(maps)[:count]
    side = int(np.ceil(np.sqrt(len(maps))))
    fig, axes = plt.subplots(side, side, figsize=(1.2 * side, 1.2 * side), squeeze=False)
    for i, ax in enumerate(axes.flat):
        ax.axis("off")
        if i < len(maps):
            ax.imshow(maps[i], cmap="viridis", vmin=0, vmax=1)
            ax.set_title(str(i), fontsize=6)
    out = Path(stem).with_suffix(".png")
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    plt.close(fig)
    return out


def influence_map(stem: str | Path, image: np.ndarray, delta: np.ndarray, threshold: float,
                  value_range=(-1.0, 1.0), title: str = "") -> Path:
    delta = np.asarray(delta)
    write_csv(Path(stem).with_suffix(".csv"), [f"col{j}" for j in range(delta.shape[1])],
              delta.tolist())
    fig, axes = plt.subplots(1, 2, figsize=(4.2, 2.2))
    disp = _to_display(image, value_range)
    axes[0].imshow(disp, cmap="gray" if disp.ndim == 2 else None, vmin=0, vmax=1)
    axes[0].set_title("input")
    im = axes[1].imshow(delta, cmap="magma")
    axes[1].contour(delta > threshold, levels=[0.5], colors="cyan", linewidths=0.6)
    axes[1].set_title(title or "mean |change|")
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    for ax in axes:
        ax.axis("off")
    out = Path(stem).with_suffix(".png")
    fig.savefig(out)
    plt.close(fig)
    return out


def curves(stem: str | Path, xlabel: str, ylabel: str, series: dict[str, tuple[list, list]],
           logy: bool = False) -> Path:
    """Line plot of named ``(x, y)`` series; the CSV is long-format ``series,x,y``."""
    rows = [(name, x, y) for name, (xs, ys) in series.items() for x, y in zip(xs, ys)]
    write_csv(Path(stem).with_suffix(".csv"), ["series", xlabel, ylabel], rows)
    fig, ax = plt.subplots(figsize=(4, 2.8))
    for name, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", ms=3, label=name)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    out = Path(stem).with_suffix(".png")
    fig.savefig(out)
    plt.close(fig)
    return out


def training_curves(metrics_path: str | Path, stem: str | Path) -> Path | None:
    """Reconstruction loss and test PSNR from a metrics log."""
    train, evals = [], []
    for line in Path(metrics_path).read_text().splitlines():
        rec = json.loads(line)
        (train if rec.get("kind") == "train" else evals).append(rec)
    if not train:
        return None
    fig, axes = plt.subplots(1, 2, figsize=(7, 2.6))
    axes[0].plot([r["step"] for r in train], [r["rec"] for r in train], lw=0.8)
    axes[0].set_yscale("log")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("reconstruction MSE")
    if evals:
        axes[1].plot([r["epoch"] for r in evals], [r["psnr"] for r in evals], marker="o")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("test PSNR (dB)")
    for ax in axes:
        ax.grid(alpha=0.3)
    out = Path(stem).with_suffix(".png")
    fig.savefig(out)
    plt.close(fig)
    return out
