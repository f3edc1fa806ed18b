"""Training loss and image-quality metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .bottleneck import Quantised


@dataclass
class LossBreakdown:
    rec: torch.Tensor
    commit: torch.Tensor
    code: torch.Tensor
    total: torch.Tensor
    code_weight: float = 0.25
    commit_weight: float = 1.0

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("rec", "commit", "code", "total")}


def vq_loss(x: torch.Tensor, x_hat: torch.Tensor, quant: Quantised,
            code_weight: float = 0.25, commit_weight: float = 1.0) -> LossBreakdown:
    """rec + commit_weight * commit + code_weight * code, with mean-squared reconstruction."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {list(x.shape)} vs {list(x_hat.shape)}")
    rec = F.mse_loss(x_hat, x)
    total = rec + commit_weight * quant.commit_loss + code_weight * quant.code_loss
    return LossBreakdown(rec, quant.commit_loss, quant.code_loss, total, code_weight,
                         commit_weight)


def psnr(x: torch.Tensor, x_hat: torch.Tensor, max_value: float) -> float:
    """10 log10(max^2 / MSE) over all elements; +inf for identical inputs."""
    if x.shape != x_hat.shape:
        raise ValueError("shape mismatch")
    mse = float(((x.double() - x_hat.double()) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10 * math.log10(max_value ** 2 / mse)


def psnr_per_image(x: torch.Tensor, x_hat: torch.Tensor, max_value: float) -> torch.Tensor:
    mse = ((x.double() - x_hat.double()) ** 2).flatten(1).mean(1)
    return 10 * torch.log10(max_value ** 2 / mse)   # inf where mse == 0


def _gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    ax = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-ax ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_per_image(x: torch.Tensor, x_hat: torch.Tensor, data_range: float,
                   window: int = 11, sigma: float = 1.5,
                   k1: float = 0.01, k2: float = 0.03) -> torch.Tensor:
    """Gaussian-window SSIM averaged over valid positions and channels, one value per image."""
    if x.shape != x_hat.shape:
        raise ValueError("shape mismatch")
    if x.dim() == 2:
        x, x_hat = x[None, None], x_hat[None, None]
    elif x.dim() == 3:
        x, x_hat = x[None], x_hat[None]
    if x.shape[-1] < window or x.shape[-2] < window:
        raise ValueError(f"image {tuple(x.shape[-2:])} smaller than the {window}x{window} window")
    b, c = x.shape[:2]
    x = x.double().reshape(b * c, 1, *x.shape[-2:])
    y = x_hat.double().reshape(b * c, 1, *x_hat.shape[-2:])
    w = _gaussian_window(window, sigma)[None, None]
    mu_x, mu_y = F.conv2d(x, w), F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mu_x ** 2
    syy = F.conv2d(y * y, w) - mu_y ** 2
    sxy = F.conv2d(x * y, w) - mu_x * mu_y
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2))
    return s.flatten(1).mean(1).reshape(b, c).mean(1)


def ssim(x: torch.Tensor, x_hat: torch.Tensor, data_range: float = 1.0, **kw) -> float:
    return float(ssim_per_image(x, x_hat, data_range, **kw).mean())
