"""U-Net encoder and decoder built from residual blocks.

The encoder maps an image batch ``[B, in, W, H]`` to a feature map
``[B, out, W/2^f, H/2^f]`` and the decoder maps it back. Both are U-Nets
with ``f + 1`` resolution levels below the input: the encoder omits the
``f`` outermost upsampling steps and the decoder omits the matching
downsampling steps, so each has exactly one interior level with a skip
connection around it at the bottleneck resolution.
"""
from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .config import ModelConfig


class NumericFault(RuntimeError):
    """Non-finite values appeared in activations or losses."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"step {step}: {message}")


def _groups(channels: int) -> int:
    g = min(32, channels)
    while channels % g:
        g -= 1
    return g


def norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(_groups(channels), channels)


def level_channels(cfg: ModelConfig) -> list[int]:
    """Channel width per resolution level, doubling down to the cap at the deepest level."""
    levels = cfg.downscale_factor + 1
    base = max(1, cfg.unet_channels >> levels)
    return [min(cfg.unet_channels, base * 2 ** i) for i in range(levels + 1)]


class ResBlock(nn.Module):
    """norm -> SiLU -> conv -> norm -> SiLU -> conv, plus a (projected) skip."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.norm1 = norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Downsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


def _stack(in_ch: int, out_ch: int, blocks: int) -> nn.Sequential:
    layers = [ResBlock(in_ch, out_ch)]
    layers += [ResBlock(out_ch, out_ch) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class _Interior(nn.Module):
    """One U-Net level: blocks, down, blocks, up, concat skip, blocks."""

    def __init__(self, ch: int, deep_ch: int, blocks: int):
        super().__init__()
        self.pre = _stack(ch, ch, blocks)
        self.down = Downsample(ch, deep_ch)
        self.deep = _stack(deep_ch, deep_ch, blocks)
        self.up = Upsample(deep_ch, ch)
        self.post = _stack(2 * ch, ch, blocks)

    def forward(self, x):
        skip = self.pre(x)
        h = self.up(self.deep(self.down(skip)))
        return self.post(torch.cat([h, skip], dim=1))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig, out_channels: int | None = None):
        super().__init__()
        self.cfg = cfg
        ch = level_channels(cfg)
        f = cfg.downscale_factor
        out_channels = cfg.num_tokens if out_channels is None else out_channels
        self.out_channels = out_channels
        self.stem = nn.Conv2d(cfg.input_channels, ch[0], 3, padding=1)
        stages = []
        for i in range(f):
            stages += [_stack(ch[i], ch[i], cfg.unet_blocks), Downsample(ch[i], ch[i + 1])]
        self.down = nn.Sequential(*stages)
        self.interior = _Interior(ch[f], ch[f + 1], cfg.unet_blocks)
        self.out_norm = norm(ch[f])
        self.out = nn.Conv2d(ch[f], out_channels, 3, padding=1)

    def forward(self, x):
        expected = (self.cfg.input_channels, *self.cfg.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input [B, {', '.join(map(str, expected))}], "
                             f"got {list(x.shape)}")
        h = self.interior(self.down(self.stem(x)))
        return self.out(F.silu(self.out_norm(h)))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, in_channels: int | None = None):
        super().__init__()
        self.cfg = cfg
        ch = level_channels(cfg)
        f = cfg.downscale_factor
        in_channels = cfg.num_tokens if in_channels is None else in_channels
        self.in_channels = in_channels
        self.stem = nn.Conv2d(in_channels, ch[f], 3, padding=1)
        self.interior = _Interior(ch[f], ch[f + 1], cfg.unet_blocks)
        stages = []
        for i in reversed(range(f)):
            stages += [Upsample(ch[i + 1], ch[i]), _stack(ch[i], ch[i], cfg.unet_blocks)]
        self.up = nn.Sequential(*stages)
        self.out_norm = norm(ch[0])
        self.out = nn.Conv2d(ch[0], cfg.input_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, fm):
        gw, gh = self.cfg.grid_size
        if fm.dim() != 4 or tuple(fm.shape[1:]) != (self.in_channels, gw, gh):
            raise ValueError(f"expected feature map [B, {self.in_channels}, {gw}, {gh}], "
                             f"got {list(fm.shape)}")
        h = self.up(self.interior(self.stem(fm)))
        return self.out(F.silu(self.out_norm(h)))


def check_finite(t: torch.Tensor, what: str, step: int | None = None) -> None:
    if not torch.isfinite(t).all():
        raise NumericFault(f"non-finite values in {what}", step)
