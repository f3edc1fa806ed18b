"""Linear reference decompositions: DFT low-pass truncation and Laplacian pyramids."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import ndimage

from .bottleneck import grid_bottleneck  # noqa: F401  (vanilla VQ-VAE grid baseline)


def dft_forward(image: np.ndarray) -> np.ndarray:
    """F(u, v) = sum_x sum_y I[x, y] exp(-2 pi i (u x / W + v y / H))."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("expected a single-channel 2-d image")
    return np.fft.fft2(image)


def dft_inverse(coeffs: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(coeffs)


def _signed(k: int, n: int) -> int:
    return k if k <= n // 2 else k - n


@lru_cache(maxsize=32)
def frequency_groups(w: int, h: int) -> tuple[tuple[tuple[int, int], ...], ...]:
    """Coefficient index groups ordered from low to high frequency.

    A group is a conjugate pair ``{(u, v), (-u, -v)}`` or a self-conjugate
    coefficient. Groups are sorted by ``|u| + |v|`` of the signed
    frequencies, then by ``max(|u|, |v|)``, then by index.
    """
    seen = set()
    groups = []
    for u in range(w):
        for v in range(h):
            if (u, v) in seen:
                continue
            partner = ((-u) % w, (-v) % h)
            members = tuple(sorted({(u, v), partner}))
            seen.update(members)
            su, sv = abs(_signed(u, w)), abs(_signed(v, h))
            groups.append(((su + sv, max(su, sv), members[0]), members))
    groups.sort(key=lambda g: g[0])
    return tuple(g[1] for g in groups)


def num_frequency_groups(shape: tuple[int, int]) -> int:
    return len(frequency_groups(*shape))


def dft_truncate_reconstruct(image: np.ndarray, n: int) -> np.ndarray:
    """Real image rebuilt from the ``n`` lowest frequency groups."""
    image = np.asarray(image, dtype=np.float64)
    groups = frequency_groups(*image.shape)
    if not 0 <= n <= len(groups):
        raise ValueError(f"n={n} outside [0, {len(groups)}]")
    coeffs = dft_forward(image)
    keep = np.zeros(image.shape, dtype=bool)
    for members in groups[:n]:
        for uv in members:
            keep[uv] = True
    return dft_inverse(np.where(keep, coeffs, 0)).real


_BINOMIAL = np.array([1, 4, 6, 4, 1], dtype=np.float64) / 16


def _blur(image: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(image, _BINOMIAL, axis=0, mode="reflect")
    return ndimage.correlate1d(out, _BINOMIAL, axis=1, mode="reflect")


def reduce(image: np.ndarray) -> np.ndarray:
    return _blur(image)[::2, ::2]


def expand(image: np.ndarray) -> np.ndarray:
    # pad the coarse image first so zero insertion keeps its parity at the borders
    p = np.pad(np.asarray(image, dtype=np.float64), 2, mode="symmetric")
    up = np.zeros((p.shape[0] * 2, p.shape[1] * 2), dtype=np.float64)
    up[::2, ::2] = p
    w, h = image.shape
    return 4 * _blur(up)[4:4 + 2 * w, 4:4 + 2 * h]


def laplacian_build(image: np.ndarray, levels: int) -> list[np.ndarray]:
    """``[L_0, ..., L_{n-1}, G_n]`` with ``L_i = G_i - expand(G_{i+1})``."""
    g = np.asarray(image, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("expected a single-channel 2-d image")
    step = 2 ** levels
    if levels < 0 or g.shape[0] % step or g.shape[1] % step:
        raise ValueError(f"image {g.shape} not divisible by 2^{levels}")
    pyramid = []
    for _ in range(levels):
        nxt = reduce(g)
        pyramid.append(g - expand(nxt))
        g = nxt
    pyramid.append(g)
    return pyramid


def laplacian_collapse(pyramid: list[np.ndarray], keep: int | None = None) -> np.ndarray:
    """Invert :func:`laplacian_build`.

    ``keep`` limits reconstruction to the base image plus the ``keep``
    coarsest band-pass levels (finer levels treated as zero).
    """
    bands = pyramid[:-1]
    n = len(bands)
    keep = n if keep is None else keep
    if not 0 <= keep <= n:
        raise ValueError(f"keep={keep} outside [0, {n}]")
    g = pyramid[-1]
    for i in reversed(range(n)):
        g = expand(g)
        if i >= n - keep:
            g = g + bands[i]
    return g


def dft_curve(images: np.ndarray, ns: list[int]) -> list[float]:
    """Mean squared error of DFT truncation at each ``n``, averaged over images."""
    return [float(np.mean([np.mean((dft_truncate_reconstruct(im, n) - im) ** 2)
                           for im in images])) for n in ns]


def laplacian_curve(images: np.ndarray, levels: int) -> list[float]:
    """MSE when keeping the base image and the 0..levels coarsest bands."""
    out = []
    pyramids = [laplacian_build(im, levels) for im in images]
    for keep in range(levels + 1):
        out.append(float(np.mean([np.mean((laplacian_collapse(p, keep) - im) ** 2)
                                  for p, im in zip(pyramids, images)])))
    return out
