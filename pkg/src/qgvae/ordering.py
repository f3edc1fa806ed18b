"""Prefix masking of the token sequence to order tokens from coarse to fine."""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class OrderingMask:
    k: int
    mask: torch.Tensor   # [C], ones for the first k tokens


def prefix_mask(num_tokens: int, k: int, dtype=torch.float32) -> OrderingMask:
    if not 0 <= k <= num_tokens:
        raise ValueError(f"k={k} outside [0, {num_tokens}]")
    m = torch.zeros(num_tokens, dtype=dtype)
    m[:k] = 1
    return OrderingMask(k, m)


def sample_mask(num_tokens: int, generator: torch.Generator | None = None) -> OrderingMask:
    """Draw k uniformly from {0, ..., C} and build the prefix mask."""
    if num_tokens < 1:
        raise ValueError("need at least one token")
    k = int(torch.randint(0, num_tokens + 1, (), generator=generator))
    return prefix_mask(num_tokens, k)


def apply_ordering(quantised: torch.Tensor, mask: OrderingMask) -> torch.Tensor:
    """Zero every token column from index k onwards of a ``[B, d, C]`` matrix."""
    if quantised.shape[-1] != mask.mask.shape[0]:
        raise ValueError(f"mask length {mask.mask.shape[0]} != {quantised.shape[-1]} tokens")
    return quantised * mask.mask.to(quantised)


def is_ordering_batch(batch_index: int, enabled: bool) -> bool:
    """Every third batch (indices 0, 3, 6, ...) carries a mask when enabled."""
    return enabled and batch_index % 3 == 0
