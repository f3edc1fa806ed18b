"""Global token bottleneck: collapse/transpose, headed projections, quantisation.

A feature map ``[B, C, W', H']`` is flattened per channel and transposed to
``[B, W'*H', C]`` so that every channel becomes one column. Each column is
projected to a ``d``-dimensional vector by the head that owns it, giving a
``[B, d, C]`` matrix whose column ``c`` is quantised against codebook ``c``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import NumericFault


class ShapeError(ValueError):
    pass


def collapse_transpose(fm: torch.Tensor) -> torch.Tensor:
    """``[B, C, W', H']`` -> ``[B, W'*H', C]`` with row-major flattening of the grid."""
    if fm.dim() != 4:
        raise ShapeError(f"expected a 4-d feature map, got shape {list(fm.shape)}")
    return fm.flatten(2).transpose(1, 2)


def expand_transpose(slices: torch.Tensor, width: int, height: int) -> torch.Tensor:
    """Inverse of :func:`collapse_transpose`."""
    if slices.dim() != 3 or slices.shape[1] != width * height:
        raise ShapeError(f"cannot expand {list(slices.shape)} to a {width}x{height} grid")
    b, _, c = slices.shape
    return slices.transpose(1, 2).reshape(b, c, width, height)


class HeadProjection(nn.Module):
    """Per-head affine maps between ``in_features`` and ``out_features``.

    Head ``h`` owns the contiguous block of columns
    ``[h*C/heads, (h+1)*C/heads)`` and applies ``weight[h] @ column + bias[h]``
    to each of them.
    """

    def __init__(self, in_features: int, out_features: int, num_heads: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.num_heads = num_heads
        bound = in_features ** -0.5
        self.weight = nn.Parameter(
            torch.empty(num_heads, out_features, in_features).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(num_heads, out_features).uniform_(-bound, bound))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [B, in_features, C] -> [B, out_features, C]
        if x.dim() != 3 or x.shape[1] != self.in_features:
            raise ShapeError(f"expected [B, {self.in_features}, C], got {list(x.shape)}")
        b, n, c = x.shape
        if c % self.num_heads:
            raise ValueError(f"{self.num_heads} heads do not divide {c} columns")
        xs = x.reshape(b, n, self.num_heads, c // self.num_heads)
        out = torch.einsum("hon,bnhc->bohc", self.weight, xs) + self.bias.t()[None, :, :, None]
        return out.reshape(b, self.out_features, c)


def project_heads(slices: torch.Tensor, proj: HeadProjection) -> torch.Tensor:
    """``[B, W'*H', C]`` -> pre-quantisation matrix ``[B, d, C]``."""
    return proj(slices)


def unproject_heads(quantised: torch.Tensor, proj: HeadProjection) -> torch.Tensor:
    """``[B, d, C]`` -> ``[B, W'*H', C]`` through the decode-side heads."""
    return proj(quantised)


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericFault(f"non-finite values in {what}")


def squared_distances(x: torch.Tensor, codebooks: torch.Tensor) -> torch.Tensor:
    """Pairwise squared distances ``[G, N, V]`` for ``x: [G, N, d]``, ``codebooks: [G, V, d]``."""
    d2 = torch.baddbmm((codebooks ** 2).sum(-1)[:, None, :], x, codebooks.transpose(1, 2),
                       alpha=-2.0)
    return d2 + (x ** 2).sum(-1, keepdim=True)


def nearest_codeword(v: torch.Tensor, codebook: torch.Tensor) -> tuple[int, torch.Tensor]:
    """Index and row of the codeword closest to ``v`` (lowest index on ties)."""
    if codebook.dim() != 2 or codebook.shape[0] == 0:
        raise ShapeError("codebook must be a non-empty [V, d] matrix")
    _check_finite(v, "query vector")
    _check_finite(codebook, "codebook")
    d2 = squared_distances(v.detach().double().reshape(1, 1, -1),
                           codebook.detach().double()[None])[0, 0]
    idx = int(torch.argmin(d2))
    return idx, codebook[idx]


@dataclass
class Quantised:
    indices: torch.Tensor      # [B, C] (or grid shape for the baseline)
    quantised: torch.Tensor    # same shape as the input, straight-through when tracking grads
    commit_loss: torch.Tensor
    code_loss: torch.Tensor


def quantise_columns(x: torch.Tensor, codebooks: torch.Tensor, group_of: torch.Tensor,
                     mask: torch.Tensor | None = None) -> Quantised:
    """Quantise column ``c`` of ``x: [B, d, C]`` against ``codebooks[group_of[c]]``.

    ``mask`` (``[C]`` or ``[B, C]``, 0/1) restricts both VQ losses to active
    columns; the selection itself is computed for every column.
    """
    if x.dim() != 3:
        raise ShapeError(f"expected [B, d, C], got {list(x.shape)}")
    b, d, c = x.shape
    if codebooks.dim() != 3 or codebooks.shape[2] != d or group_of.shape != (c,):
        raise ValueError(f"codebook bank {list(codebooks.shape)} does not match input "
                         f"[B, {d}, {c}]")
    _check_finite(x, "pre-quantisation matrix")
    cols = x.permute(2, 0, 1)                           # [C, B, d]
    books = codebooks[group_of]                         # [C, V, d]
    with torch.no_grad():
        # float64 keeps the expanded distance form from flipping near-ties
        d2 = squared_distances(cols.detach().double(), books.detach().double())
        idx = torch.argmin(d2, dim=-1)                  # [C, B]
    q = torch.gather(books, 1, idx[..., None].expand(-1, -1, d))  # [C, B, d]
    q = q.permute(1, 2, 0)                              # [B, d, C]

    commit_err = ((x - q.detach()) ** 2).mean(1)        # [B, C]
    code_err = ((x.detach() - q) ** 2).mean(1)
    if mask is None:
        commit, code = commit_err.mean(), code_err.mean()
    else:
        w = mask.to(x.dtype).expand(b, c)
        n = w.sum()
        if n > 0:
            commit, code = (commit_err * w).sum() / n, (code_err * w).sum() / n
        else:
            commit, code = commit_err.sum() * 0, code_err.sum() * 0
    # straight-through: reconstruction gradients reach x unchanged, never the codebook
    out = x + (q - x).detach() if x.requires_grad else q.detach()
    return Quantised(idx.transpose(0, 1), out, commit, code)


def quantise_all(pq: torch.Tensor, bank, mask: torch.Tensor | None = None) -> Quantised:
    """Per-frequency quantisation of ``pq: [B, d, C]`` against a :class:`CodebookBank`."""
    if pq.shape[2] != bank.group_of.shape[0]:
        raise ValueError(f"bank serves {bank.group_of.shape[0]} frequencies, input has "
                         f"{pq.shape[2]}")
    return quantise_columns(pq, bank.codebooks, bank.group_of, mask)


def lookup(indices: torch.Tensor, bank) -> torch.Tensor:
    """Codewords for ``indices: [B, C]`` as a ``[B, d, C]`` matrix."""
    books = bank.codebooks[bank.group_of]               # [C, V, d]
    if indices.min() < 0 or indices.max() >= books.shape[1]:
        raise ValueError("token index out of codebook range")
    c = torch.arange(books.shape[0], device=indices.device)
    return books[c[None, :], indices].permute(0, 2, 1)


def grid_bottleneck(fm: torch.Tensor, codebook: torch.Tensor,
                    mask: torch.Tensor | None = None) -> Quantised:
    """Vanilla VQ-VAE bottleneck: every grid position against one shared codebook.

    ``fm: [B, d, W', H']``, ``codebook: [V, d]``. Returns an index grid
    ``[B, W', H']`` and a quantised feature map of the input's shape.
    """
    if fm.dim() != 4 or fm.shape[1] != codebook.shape[1]:
        raise ValueError(f"feature map {list(fm.shape)} does not match codebook "
                         f"{list(codebook.shape)}")
    b, d, w, h = fm.shape
    # every position is a batch row of a single column quantised against codebook 0
    x = fm.permute(0, 2, 3, 1).reshape(b * w * h, d, 1)
    m = None if mask is None else mask.reshape(b * w * h, 1)
    res = quantise_columns(x, codebook[None], torch.zeros(1, dtype=torch.long,
                                                          device=fm.device), m)
    q = res.quantised.reshape(b, w, h, d).permute(0, 3, 1, 2)
    return Quantised(res.indices.reshape(b, w, h), q, res.commit_loss, res.code_loss)
