"""Probes of the learned representation: feature maps, token influence, prefix decoding."""
from __future__ import annotations

import torch

from .model import QGVAE


@torch.no_grad()
def feature_map_dump(model, x: torch.Tensor) -> torch.Tensor:
    """Bottleneck feature maps of one image, each channel min-max scaled to [0, 1].

    Returns ``[C, W', H']``; constant channels map to zeros.
    """
    model.eval()
    fm = model.feature_maps(x[:1] if x.dim() == 4 else x[None])[0]
    flat = fm.flatten(1)
    lo = flat.min(1).values[:, None, None]
    span = (flat.max(1).values - flat.min(1).values)[:, None, None]
    return torch.where(span > 0, (fm - lo) / span.clamp_min(1e-12), torch.zeros_like(fm))


@torch.no_grad()
def token_influence(model, x: torch.Tensor, token: int, chunk: int = 128) -> torch.Tensor:
    """Mean absolute output change over every replacement of one token.

    For a single image, token ``token`` is set to each of the ``V`` codebook
    entries in turn and decoded; the result is the per-pixel mean of
    ``|decode(replaced) - decode(original)|`` over all replacements,
    averaged across channels, shape ``[W, H]``.
    """
    model.eval()
    x = x[:1] if x.dim() == 4 else x[None]
    idx = model.encode_tokens(x)                       # [1, T]
    if not 0 <= token < idx.shape[1]:
        raise ValueError(f"token {token} outside [0, {idx.shape[1]})")
    base = model.decode_tokens(idx)
    total = torch.zeros_like(base[0, 0], dtype=torch.float64)
    v = model.cfg.codebook_size
    for start in range(0, v, chunk):
        vals = torch.arange(start, min(v, start + chunk), device=idx.device)
        rep = idx.repeat(len(vals), 1)
        rep[:, token] = vals
        out = model.decode_tokens(rep)
        total += (out - base).abs().mean(1).double().sum(0)
    return (total / v).float()


def influence_coverage(delta: torch.Tensor, threshold: float) -> float:
    """Fraction of pixels whose change exceeds ``threshold``."""
    return float((delta > threshold).float().mean())


@torch.no_grad()
def decompose(model, x: torch.Tensor, ks: list[int]) -> list[torch.Tensor]:
    """Reconstructions from the first ``k`` tokens for each ``k`` in ``ks``."""
    if not isinstance(model, QGVAE):
        raise TypeError("prefix decoding needs a global-token model")
    c = model.cfg.num_tokens
    for k in ks:
        if not 0 <= k <= c:
            raise ValueError(f"k={k} outside [0, {c}]")
    model.eval()
    idx = model.encode_tokens(x)
    return [model.decode_tokens(idx, k) for k in ks]
